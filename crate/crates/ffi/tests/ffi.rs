use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::ptr;

use widenet_ffi::*;

fn last_error() -> String {
    let p = wn_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn count_parameters_matches_core() {
    let mut n = 0u64;
    // SAC critic of the small published baseline: 2 × 256 MLP on 17 + 6 inputs, scalar head
    let st = unsafe { wn_count_parameters(WnBlockKind::Mlp, 23, 2, 256, false, 1, &mut n) };
    assert_eq!(st, WnStatus::Ok);
    assert_eq!(n, (23 * 256 + 256) + (256 * 256 + 256) + (256 + 1));
    let mut d = 0u64;
    assert_eq!(unsafe { wn_output_dim(WnBlockKind::Densenet, 10, 3, 4, &mut d) }, WnStatus::Ok);
    assert_eq!(d, 22);
}

#[test]
fn errors_are_reported() {
    let mut n = 0u64;
    let st = unsafe { wn_count_parameters(WnBlockKind::Mlp, 3, 2, 0, false, 0, &mut n) };
    assert_eq!(st, WnStatus::Config);
    assert!(last_error().contains("units"));
    let st = unsafe { wn_count_parameters(WnBlockKind::Mlp, 3, 2, 4, false, 0, ptr::null_mut()) };
    assert_eq!(st, WnStatus::NullPointer);
    assert!(last_error().contains("out_total"));
}

#[test]
fn effective_rank_of_identity() {
    let n = 10;
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    let mut r = 0u64;
    assert_eq!(unsafe { wn_effective_rank(m.as_ptr(), n, n, 0.01, &mut r) }, WnStatus::Ok);
    assert_eq!(r, 10);
    assert_eq!(unsafe { wn_effective_rank(m.as_ptr(), n, n, 1.5, &mut r) }, WnStatus::Config);
}

#[test]
fn replay_roundtrip() {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { wn_replay_new(8, 2, 1, 1.0, 1e-6, false, 3, &mut h) }, WnStatus::Ok);
    let s = [0.0, 1.0];
    for i in 0..2 {
        let a = [i as f64];
        assert_eq!(unsafe { wn_replay_add(h, s.as_ptr(), a.as_ptr(), 0.5, s.as_ptr(), false, ptr::null_mut()) }, WnStatus::Ok);
    }
    let mut len = 0;
    unsafe { wn_replay_len(h, &mut len) };
    assert_eq!(len, 2);
    // priorities 1 and 3 with α = 1 → slot 1 drawn three times as often
    let mut seen = [false; 2];
    while !(seen[0] && seen[1]) {
        let (mut sl, mut g, mut w) = ([0u64; 2], [0u64; 2], [0.0; 2]);
        assert_eq!(unsafe { wn_replay_sample(h, 2, 1.0, sl.as_mut_ptr(), g.as_mut_ptr(), w.as_mut_ptr()) }, WnStatus::Ok);
        let td: Vec<f64> = sl.iter().map(|&x| if x == 0 { 1.0 - 1e-6 } else { 3.0 - 1e-6 }).collect();
        assert_eq!(unsafe { wn_replay_update_priorities(h, sl.as_ptr(), g.as_ptr(), td.as_ptr(), 2) }, WnStatus::Ok);
        for &x in &sl {
            seen[x as usize] = true;
        }
    }
    let n = 20_000;
    let mut ones = 0;
    for _ in 0..n {
        let (mut sl, mut g, mut w) = (0u64, 0u64, 0.0);
        assert_eq!(unsafe { wn_replay_sample(h, 1, 1.0, &mut sl, &mut g, &mut w) }, WnStatus::Ok);
        assert!(w > 0.0 && w <= 1.0);
        ones += (sl == 1) as usize;
    }
    let frac = ones as f64 / n as f64;
    assert!((frac - 0.75).abs() < 0.02, "{frac}");
    let mut sl = [0u64; 3];
    assert_eq!(unsafe { wn_replay_sample(h, 3, 1.0, sl.as_mut_ptr(), sl.as_mut_ptr(), ptr::null_mut()) }, WnStatus::NullPointer);
    unsafe { wn_replay_free(h) };
}

#[test]
fn env_steps_through_the_abi() {
    let name = CString::new("pendulum").unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { wn_env_new(name.as_ptr(), &mut h) }, WnStatus::Ok);
    let (mut sd, mut ad) = (0, 0);
    unsafe { wn_env_dims(h, &mut sd, &mut ad) };
    assert_eq!((sd, ad), (3, 1));
    let mut s = [0.0; 3];
    assert_eq!(unsafe { wn_env_reset(h, 1, s.as_mut_ptr()) }, WnStatus::Ok);
    assert!((s[0] * s[0] + s[1] * s[1] - 1.0).abs() < 1e-12);
    let (mut r, mut done) = (0.0, true);
    let a = [0.0];
    assert_eq!(unsafe { wn_env_step(h, a.as_ptr(), s.as_mut_ptr(), &mut r, &mut done) }, WnStatus::Ok);
    assert!(r <= 0.0 && !done);
    unsafe { wn_env_free(h) };
    let bad = CString::new("ant").unwrap();
    assert_ne!(unsafe { wn_env_new(bad.as_ptr(), &mut h) }, WnStatus::Ok);
}

#[test]
fn policy_from_checkpoint_acts_in_bounds() {
    let mut c = widenet::config::ExperimentConfig::default();
    c.run.mode = widenet::config::RunMode::Sync;
    c.run.n_core = 1;
    c.run.gradient_steps = 5;
    c.run.eval_episodes = 1;
    c.agent.warmup_steps = Some(16);
    c.agent.batch_size = 8;
    c.diagnostics.rank_interval = 0;
    c.diagnostics.surface_samples = 0;
    let dir = tempfile::tempdir().unwrap();
    widenet::distributed::run_experiment(&c, 1, dir.path()).unwrap();
    let path = CString::new(dir.path().join("checkpoint.bin").to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { wn_policy_load(path.as_ptr(), &mut h) }, WnStatus::Ok);
    let states = [1.0, 0.0, 0.0, 0.0, 1.0, -2.0];
    let mut a = [0.0; 2];
    assert_eq!(unsafe { wn_policy_act(h, states.as_ptr(), 2, a.as_mut_ptr()) }, WnStatus::Ok);
    assert!(a.iter().all(|x| x.abs() <= 2.0));
    unsafe { wn_policy_free(h) };
    let missing = CString::new("/nonexistent/checkpoint.bin").unwrap();
    assert_eq!(unsafe { wn_policy_load(missing.as_ptr(), &mut h) }, WnStatus::Io);
}

#[test]
fn header_is_valid_c() {
    let header = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/widenet.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in ["wn_count_parameters", "wn_replay_sample", "wn_policy_act", "wn_last_error", "WN_STATUS_OK"] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let Ok(status) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(&header)
        .status()
    else {
        eprintln!("no C compiler; syntax check skipped");
        return;
    };
    assert!(status.success());
}
