use advqa::eval::{exact_match, f1};
use serde::Deserialize;

#[derive(Deserialize)]
struct Case {
    prediction: String,
    golds: Vec<String>,
    em: u8,
    f1: (u32, u32),
}

#[test]
fn golden_cases_match_exactly() {
    let cases: Vec<Case> = serde_json::from_str(include_str!("fixtures/eval_golden.json")).unwrap();
    assert_eq!(cases.len(), 20);
    for c in &cases {
        let em = exact_match(&c.prediction, &c.golds).unwrap();
        let f = f1(&c.prediction, &c.golds).unwrap();
        assert_eq!(em, f64::from(c.em), "EM of {:?} vs {:?}", c.prediction, c.golds);
        assert_eq!(f, f64::from(c.f1.0) / f64::from(c.f1.1), "F1 of {:?} vs {:?}", c.prediction, c.golds);
    }
}
