use crate::records::PredictionRecord;

pub fn record(id: &str, top_probs: [f64; 5], correct: bool) -> PredictionRecord {
    PredictionRecord {
        id: id.into(),
        domain: "squad".into(),
        passage_len: 100,
        prediction_len: 2,
        top_probs,
        correct,
        answerable: None,
        dropout_probs: None,
        dropout_mean_top_probs: None,
    }
}

/// Record whose MaxProb is `conf`.
pub fn with_conf(id: &str, conf: f64, correct: bool) -> PredictionRecord {
    record(id, [conf, 0.0, 0.0, 0.0, 0.0], correct)
}
