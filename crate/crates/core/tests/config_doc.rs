//! The examples in docs/config.md must stay loadable.

use diffaug::generator::GeneratorRun;
use diffaug::pipeline::ExperimentConfig;

fn json_blocks() -> Vec<String> {
    let doc = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/config.md"))
        .unwrap();
    doc.split("```json\n")
        .skip(1)
        .map(|b| b.split("```").next().unwrap().to_string())
        .collect()
}

#[test]
fn documented_defaults_match_code() {
    let blocks = json_blocks();
    let documented: ExperimentConfig = serde_json::from_str(&blocks[0]).unwrap();
    assert_eq!(documented, ExperimentConfig::default());
    documented.validate().unwrap();
}

#[test]
fn documented_generation_run_parses() {
    let run: GeneratorRun = serde_json::from_str(&json_blocks()[1]).unwrap();
    assert_eq!(run.sampler_steps, 200);
}

#[test]
fn unknown_keys_are_rejected() {
    let err =
        serde_json::from_str::<ExperimentConfig>(r#"{"toy": {"real_per_clas": 3}}"#).unwrap_err();
    assert!(err.to_string().contains("real_per_clas"));
}
