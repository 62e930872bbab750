use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command as Process;
use std::ptr;

use delayline_ffi::*;

const CONFIG: &str = r#"{
    "time_unit": "tau",
    "subsystems": [{"name": "A", "dim": 2}],
    "hamiltonian": [[[0, 0], [1, 0]], [[1, 0], [0, 0]]],
    "couplings": {"A": [[[0, 0], [1, 0]], [[0, 0], [0, 0]]]},
    "kernel": [
        {"alpha": "A", "beta": "A", "gamma": [1, 0], "delay": {"num": 0, "den": 1}},
        {"alpha": "A", "beta": "A", "gamma": [-1, 0], "delay": {"num": 1, "den": 2}}
    ],
    "initial_state": "ground",
    "t_final": 1.0,
    "grid": [0.0, 0.25, 0.75, 1.0],
    "command": {"evolve": {"observables": [{"name": "n_excitation", "op": "n:A"}]}}
}"#;

fn take(s: *mut std::ffi::c_char) -> String {
    assert!(!s.is_null());
    let out = unsafe { CStr::from_ptr(s) }.to_str().unwrap().to_string();
    unsafe { dl_string_free(s) };
    out
}

fn load(text: &str) -> (DlStatus, *mut DlConfig) {
    let c = CString::new(text).unwrap();
    let mut cfg = ptr::null_mut();
    let status = unsafe { dl_config_from_json(c.as_ptr(), &mut cfg) };
    (status, cfg)
}

#[test]
fn plan_and_execute_round_trip() {
    let (status, cfg) = load(CONFIG);
    assert_eq!(status, DlStatus::Ok);
    let (mut num, mut den, mut n) = (0i64, 0i64, 0usize);
    assert_eq!(unsafe { dl_config_plan(cfg, &mut num, &mut den, &mut n) }, DlStatus::Ok);
    assert_eq!((num, den, n), (1, 2, 2));

    let mut res = ptr::null_mut();
    assert_eq!(unsafe { dl_execute(cfg, DlCommand::Evolve as i32, &mut res) }, DlStatus::Ok);
    assert_eq!(unsafe { dl_result_table_count(res) }, 1);
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { dl_result_table_name(res, 0, &mut s) }, DlStatus::Ok);
    assert_eq!(take(s), "evolve");
    assert_eq!(unsafe { dl_result_table_csv(res, 0, &mut s) }, DlStatus::Ok);
    let csv = take(s);
    assert!(csv.starts_with("t,n_excitation\n0,0\n"));
    assert_eq!(csv.lines().count(), 5);
    assert_eq!(unsafe { dl_result_table_csv(res, 1, &mut s) }, DlStatus::OutOfRange);
    assert!(s.is_null());
    assert!(unsafe { dl_result_max_trace_error(res) } < 1e-9);
    assert_eq!(unsafe { dl_result_diagnostics(res, &mut s) }, DlStatus::Ok);
    let diag: serde_json::Value = serde_json::from_str(&take(s)).unwrap();
    assert_eq!(diag["plan"]["n"], 2);

    // The direct observable entry agrees with the table.
    let times = [0.25, 0.75, 1.0];
    let mut values = [0.0; 3];
    let name = CString::new("n:A").unwrap();
    assert_eq!(unsafe { dl_evolve_observable(cfg, name.as_ptr(), times.as_ptr(), 3, values.as_mut_ptr()) }, DlStatus::Ok);
    for (line, v) in csv.lines().skip(2).zip(values) {
        let x: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!((x - v).abs() < 1e-11);
    }
    unsafe {
        dl_result_free(res);
        dl_config_free(cfg);
    }
}

#[test]
fn errors_carry_codes_and_json() {
    let (status, cfg) = load(&CONFIG.replace("\"t_final\"", "\"gamma_typo\": 1, \"t_final\""));
    assert_eq!(status, DlStatus::Parse);
    assert!(cfg.is_null());
    let err: serde_json::Value = serde_json::from_str(&take(dl_last_error())).unwrap();
    assert_eq!(err["error"]["kind"], "parse");
    assert_eq!(err["error"]["key"], "gamma_typo");

    let (status, cfg) = load(CONFIG);
    assert_eq!(status, DlStatus::Ok);
    assert!(dl_last_error().is_null());
    assert_eq!(unsafe { dl_config_set_max_intervals(cfg, 1) }, DlStatus::Ok);
    let mut res = ptr::null_mut();
    assert_eq!(unsafe { dl_execute(cfg, DlCommand::Evolve as i32, &mut res) }, DlStatus::ResourceCap);
    assert!(res.is_null());
    assert_eq!(unsafe { dl_execute(cfg, 42, &mut res) }, DlStatus::OutOfRange);
    assert_eq!(unsafe { dl_execute(cfg, DlCommand::G2 as i32, &mut res) }, DlStatus::Validation);
    assert_eq!(unsafe { dl_execute(ptr::null(), 0, &mut res) }, DlStatus::NullPointer);
    let bad = [0xffu8, 0];
    let mut other = ptr::null_mut();
    assert_eq!(unsafe { dl_config_from_json(bad.as_ptr().cast(), &mut other) }, DlStatus::InvalidUtf8);
    unsafe { dl_config_free(cfg) };
    unsafe { dl_config_free(ptr::null_mut()) };
    unsafe { dl_string_free(ptr::null_mut()) };
}

#[test]
fn run_to_dir_writes_csv_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(&cfg_path, CONFIG).unwrap();
    let out = dir.path().join("out");
    let (c, o) = (CString::new(cfg_path.to_str().unwrap()).unwrap(), CString::new(out.to_str().unwrap()).unwrap());
    assert_eq!(unsafe { dl_run_to_dir(c.as_ptr(), DlCommand::Evolve as i32, o.as_ptr(), 0.0, 0) }, DlStatus::Ok);
    assert!(out.join("evolve.csv").exists());
    let side: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("evolve.json")).unwrap()).unwrap();
    assert_eq!(side["plan"]["xi"]["den"], 2);
    let missing = CString::new(dir.path().join("nope.json").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { dl_run_to_dir(missing.as_ptr(), 0, o.as_ptr(), 0.0, 0) }, DlStatus::Io);
}

#[test]
fn version_is_a_static_string() {
    let v = unsafe { CStr::from_ptr(dl_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_api_and_compiles_as_c() {
    let header = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include").join("delayline.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in ["dl_config_from_json", "dl_execute", "dl_result_table_csv", "dl_last_error", "typedef struct DlConfig DlConfig", "DL_STATUS_RESOURCE_CAP = 5"] {
        assert!(text.contains(name), "{name} missing from header");
    }
    // Syntax-check with the system C compiler when one is present.
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"delayline.h\"\nint main(void) { DlConfig *c = 0; DlStatus s = dl_config_from_json(\"{}\", &c); dl_config_free(c); return s == DL_STATUS_OK; }\n",
    )
    .unwrap();
    match Process::new("cc").args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"]).arg(header.parent().unwrap()).arg(&src).output() {
        Ok(out) => assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr)),
        Err(_) => eprintln!("cc not found; skipped C syntax check"),
    }
}
