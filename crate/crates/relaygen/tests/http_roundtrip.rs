//! Client / mock-server integration over real HTTP round-trips.

use std::sync::Arc;
use std::time::Duration;

use relaygen::client::{
    EndpointConfig, GenerateOptions, HttpClient, ModelClient, SamplingParams, StopReason,
};
use relaygen::error::Error;
use relaygen::fixtures;
use relaygen::mocksim::http::{spawn_server, ServeOptions};
use relaygen::mocksim::{MockBackend, Script, ScriptToken};
use relaygen::switcher::{self, Budgets, SwitchDirection};
use relaygen::trace::Producer;

fn greedy(surface: &str) -> ScriptToken {
    ScriptToken::with_margin(surface, 0.6)
}

fn client_for(base_url: &str, model_id: &str) -> HttpClient {
    let mut cfg = EndpointConfig::new(base_url, model_id);
    cfg.timeout = Duration::from_secs(5);
    cfg.max_retries = 1;
    HttpClient::new(cfg).unwrap()
}

fn options(stops: &[&str], max_tokens: usize) -> GenerateOptions {
    GenerateOptions {
        stop_surfaces: stops.iter().map(|s| s.to_string()).collect(),
        max_tokens,
        sampling: SamplingParams::default(),
    }
}

#[test]
fn generate_stop_surface_reappended_over_wire() {
    let backend = Arc::new(MockBackend::new(vec![Script::new(
        "m",
        vec![
            greedy("P"),
            greedy(" a"),
            greedy(" b"),
            greedy(" c"),
            greedy(" d"),
            greedy(" e"),
            greedy("Thus,"),
            greedy(" rest"),
        ],
    )]));
    let server = spawn_server(backend, ServeOptions::default()).unwrap();
    let client = client_for(&server.base_url(), "m");

    // Five content tokens, then the stripped stop surface comes back as a
    // sixth, synthetic record.
    let result = client.generate("P", &options(&["Thus,"], 100)).unwrap();
    assert_eq!(result.stop_reason, StopReason::StopSurface("Thus,".into()));
    assert_eq!(result.tokens.len(), 6);
    assert!(result.tokens.last().unwrap().synthetic);
    assert!(result.text().ends_with("Thus,"));
    assert_eq!(result.usage.prompt_tokens, 1);

    // Identical request, identical result.
    let again = client.generate("P", &options(&["Thus,"], 100)).unwrap();
    assert_eq!(result, again);

    // Probability validity after the logprob conversion.
    for token in result.tokens.iter().filter(|t| !t.synthetic) {
        let probs: Vec<f64> = token.top_probs.iter().map(|(_, p)| *p).collect();
        assert!(probs.windows(2).all(|w| w[0] >= w[1]));
        assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));
    }
}

#[test]
fn generate_max_tokens_and_eos_mapping() {
    let backend = Arc::new(MockBackend::new(vec![Script::new(
        "m",
        vec![greedy("P"), greedy(" a"), greedy(" b")],
    )]));
    let server = spawn_server(backend, ServeOptions::default()).unwrap();
    let client = client_for(&server.base_url(), "m");

    let one = client.generate("P", &options(&[], 1)).unwrap();
    assert_eq!(one.stop_reason, StopReason::MaxTokens);
    assert_eq!(one.tokens.len(), 1);

    let full = client.generate("P", &options(&[], 100)).unwrap();
    assert_eq!(full.stop_reason, StopReason::EndOfSequence);
    assert_eq!(full.tokens.len(), 2);
}

#[test]
fn include_stop_in_output_yields_identical_context_text() {
    let script = Script::new(
        "m",
        vec![greedy("P"), greedy(" a"), greedy("Thus,"), greedy(" rest")],
    );
    let stripping = spawn_server(
        Arc::new(MockBackend::new(vec![script.clone()])),
        ServeOptions::default(),
    )
    .unwrap();
    let including = spawn_server(
        Arc::new(MockBackend::new(vec![script])),
        ServeOptions {
            include_stop_in_output: true,
            ..Default::default()
        },
    )
    .unwrap();
    let from_stripping = client_for(&stripping.base_url(), "m")
        .generate("P", &options(&["Thus,"], 100))
        .unwrap();
    let from_including = client_for(&including.base_url(), "m")
        .generate("P", &options(&["Thus,"], 100))
        .unwrap();
    assert_eq!(from_stripping.text(), from_including.text());
    assert_eq!(from_stripping.stop_reason, from_including.stop_reason);
    assert!(from_stripping.tokens.last().unwrap().synthetic);
    assert!(!from_including.tokens.last().unwrap().synthetic);
}

#[test]
fn rescore_over_wire_drops_first_position_only() {
    let backend = Arc::new(MockBackend::new(vec![Script::new(
        "m",
        vec![greedy("a"), greedy(" b"), greedy(" c")],
    )]));
    let server = spawn_server(backend, ServeOptions::default()).unwrap();
    let client = client_for(&server.base_url(), "m");

    let records = client.rescore("a b c").unwrap();
    assert_eq!(records.len(), 3);
    assert!(records[0].synthetic);
    assert!(records[1..].iter().all(|r| !r.synthetic));
    // Greedy script: top-1 surfaces equal the scored tokens.
    for record in &records[1..] {
        assert_eq!(record.top_probs[0].0, record.text);
    }

    assert!(matches!(
        client.rescore("").unwrap_err(),
        Error::BadRequest(_)
    ));
    assert!(matches!(
        client.rescore("unknown text").unwrap_err(),
        Error::Endpoint(_) // script miss surfaces as a 400
    ));
}

#[test]
fn health_check_and_model_not_found() {
    let backend = Arc::new(MockBackend::new(vec![Script::new(
        "m",
        vec![greedy("P")],
    )]));
    let server = spawn_server(backend, ServeOptions::default()).unwrap();

    let meta = client_for(&server.base_url(), "m").health_check().unwrap();
    assert_eq!(meta.model_id, "m");
    assert_eq!(meta.available_models, vec!["m".to_string()]);

    assert!(matches!(
        client_for(&server.base_url(), "missing").health_check().unwrap_err(),
        Error::ModelNotFound(_)
    ));
    assert!(matches!(
        client_for(&server.base_url(), "missing")
            .generate("P", &options(&[], 5))
            .unwrap_err(),
        Error::ModelNotFound(_)
    ));
}

#[test]
fn unreachable_endpoint_fails_after_retries() {
    let client = client_for("http://127.0.0.1:9", "m");
    let start = std::time::Instant::now();
    let err = client.generate("P", &options(&[], 5)).unwrap_err();
    assert!(matches!(err, Error::Endpoint(_)));
    // One retry with base backoff only.
    assert!(start.elapsed() < Duration::from_secs(3));
    assert!(matches!(
        client.health_check().unwrap_err(),
        Error::Endpoint(_)
    ));
}

#[test]
fn full_session_over_http() {
    let fixture = fixtures::two_cue_session("large-m", "small-m");
    let backend = Arc::new(MockBackend::new(vec![
        fixture.large_script,
        fixture.small_script,
    ]));
    let server = spawn_server(backend, ServeOptions::default()).unwrap();
    let large = client_for(&server.base_url(), "large-m");
    let small = client_for(&server.base_url(), "small-m");

    let cue_set = relaygen::calibration::SwitchCueSet {
        model_pair: ("large-m".into(), "small-m".into()),
        surfaces: fixture.cue_surfaces.iter().cloned().collect(),
        selection_report: Vec::new(),
        global_stats: relaygen::margin::MarginStats {
            mean: 0.5,
            std_dev: 0.1,
            std_err: 0.01,
            n: 100,
        },
    };
    let session = switcher::start_session(&fixture.prompt, &cue_set, Budgets::default()).unwrap();
    let transcript = switcher::run(session, &large, &small).unwrap();

    let directions: Vec<_> = transcript.events.iter().map(|e| e.direction).collect();
    assert_eq!(
        directions,
        vec![
            SwitchDirection::LargeToSmall,
            SwitchDirection::SmallToLarge,
            SwitchDirection::LargeToSmall,
            SwitchDirection::SmallToLarge,
            SwitchDirection::ToAnswerStage,
        ]
    );
    assert!(transcript.text.ends_with(" The answer is 4."));
    // Answer-stage purity.
    let answer_start = transcript
        .events
        .iter()
        .find(|e| e.direction == SwitchDirection::ToAnswerStage)
        .unwrap()
        .at_position;
    assert!(transcript.tokens[answer_start..]
        .iter()
        .all(|t| t.producer == Producer::Small));
}
