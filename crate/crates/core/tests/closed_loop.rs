use cortexloop_core::decoder::{assemble_training_set, evaluate};
use cortexloop_core::recording::EventKind;
use cortexloop_core::session::{self, run_session, ClockMode, SessionConfig, SessionIo, Seeds, TestBlockSpec};
use cortexloop_core::task::TestMode;
use cortexloop_core::SessionRecording;

fn quick_config(seed: u64) -> SessionConfig {
    let mut cfg = SessionConfig { seeds: Seeds::from_master(seed), ..Default::default() };
    cfg.protocol.training_trials_per_axis = 2;
    cfg.protocol.training_duration_s = 30.0;
    cfg.protocol.test_blocks = vec![
        TestBlockSpec { mode: TestMode::Horizontal1D, trials: 6 },
        TestBlockSpec { mode: TestMode::Vertical1D, trials: 6 },
        TestBlockSpec { mode: TestMode::Full2D, trials: 4 },
    ];
    cfg
}

fn run(cfg: &SessionConfig) -> session::SessionResult {
    run_session(cfg, SessionIo::default()).expect("session runs")
}

#[test]
fn full_protocol_training_rows() {
    let mut cfg = SessionConfig { seeds: Seeds::from_master(2), ..Default::default() };
    cfg.protocol.test_blocks.clear();
    let result = run(&cfg);
    let ts = assemble_training_set(&result.recording, &cfg.signal_config).unwrap();
    assert_eq!(ts.len(), 2 * 38_375);
    let one_trial = ts.trial_ids.iter().filter(|&&id| id == ts.trial_ids[0]).count();
    assert_eq!(one_trial, 7675);
}

#[test]
fn twenty_db_subject_fits_well() {
    let mut cfg = SessionConfig { seeds: Seeds::from_master(4), ..Default::default() };
    // unit-power mixing, so sigma 0.1 is 20 dB per channel
    cfg.subject.noise_sigma = 0.1;
    cfg.subject.background_level = 0.0;
    cfg.policy.reaction_delay_s = 0.0;
    cfg.protocol.test_blocks.clear();
    let result = run(&cfg);
    let report = result.summary.fit_report.expect("fit report");
    let (rx, ry) = (report.pearson_r_x.unwrap(), report.pearson_r_y.unwrap());
    assert!(rx >= 0.9 && ry >= 0.9, "r = ({rx}, {ry})");
}

#[test]
fn ideal_subject_hits_horizontal_targets() {
    let mut cfg = SessionConfig { seeds: Seeds::from_master(1), ..Default::default() };
    cfg.subject.noise_sigma = 0.01;
    cfg.protocol.test_blocks = vec![TestBlockSpec { mode: TestMode::Horizontal1D, trials: 24 }];
    let result = run(&cfg);
    let rate = result.summary.blocks[0].summary.as_ref().unwrap().overall.success_rate;
    assert!(rate >= 0.95, "success {rate}");
}

#[test]
fn replay_with_saved_model_reproduces_decoding() {
    let cfg = quick_config(9);
    let original = run(&cfg);
    let model = original.recording.model.clone();
    let replayed = session::replay_recording(&original.recording, model).unwrap();
    let (a, b) = (&original.recording.decoded, &replayed.recording.decoded);
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.t_s, y.t_s);
        assert!((x.u - y.u).abs() <= 1e-9 && (x.v - y.v).abs() <= 1e-9);
    }
    assert_eq!(original.recording.events, replayed.recording.events);
    assert_eq!(original.summary.blocks, replayed.summary.blocks);
}

#[test]
fn saved_recording_replays_identically() {
    let cfg = quick_config(6);
    let original = run(&cfg);
    let dir = tempfile::tempdir().unwrap();
    original.recording.save(dir.path()).unwrap();
    let loaded = SessionRecording::load(dir.path()).unwrap();
    assert_eq!(loaded.frames.len(), original.recording.frames.len());
    let replayed = session::replay_recording(&loaded, None).unwrap();
    assert_eq!(replayed.recording.events, original.recording.events);
    assert_eq!(replayed.recording.decoded, original.recording.decoded);
}

#[test]
fn clock_mode_does_not_change_results() {
    let mut cfg = SessionConfig { seeds: Seeds::from_master(8), ..Default::default() };
    cfg.protocol.training_trials_per_axis = 1;
    cfg.protocol.training_duration_s = 2.0;
    cfg.protocol.iti_s = 0.25;
    cfg.protocol.timeout_s = 1.5;
    cfg.protocol.test_blocks = vec![TestBlockSpec { mode: TestMode::Horizontal1D, trials: 2 }];
    let fast = run(&cfg);
    cfg.clock = ClockMode::Realtime;
    let slow = run(&cfg);
    assert_eq!(fast.recording.events, slow.recording.events);
    assert_eq!(fast.recording.decoded, slow.recording.decoded);
    assert_eq!(fast.summary, slow.summary);
    assert!(fast.recording.timing.is_none());
    assert!(slow.recording.timing.unwrap().ticks > 0);
}

#[test]
fn event_log_follows_protocol_order() {
    let result = run(&quick_config(3));
    let phases: Vec<String> = result
        .recording
        .events
        .iter()
        .filter_map(|e| match &e.kind {
            EventKind::PhaseStart { phase } => Some(phase.name()),
            _ => None,
        })
        .collect();
    assert_eq!(
        phases,
        [
            "training_horizontal",
            "training_vertical",
            "calibration",
            "test_horizontal1D",
            "test_vertical1D",
            "test_full2D"
        ]
    );
    let times: Vec<f64> = result.recording.events.iter().map(|e| e.t_s).collect();
    assert!(times.windows(2).all(|w| w[0] <= w[1]));
    assert!(result.recording.status.complete);
}

#[test]
fn fit_report_matches_independent_evaluation() {
    let cfg = quick_config(12);
    let result = run(&cfg);
    let ts = assemble_training_set(&result.recording, &cfg.signal_config).unwrap();
    let model = result.recording.model.as_ref().unwrap();
    assert_eq!(evaluate(model, &ts).unwrap(), result.summary.fit_report.unwrap());
}
