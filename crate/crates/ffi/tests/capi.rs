use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use ticontrol::config::RunConfig;
use ticontrol_ffi::*;

const REGULATOR: TicRegulatorParams = TicRegulatorParams {
    a: 1.0,
    sigma: 0.5,
    horizon: 1.0,
    x0: 0.0,
};

fn last_error() -> String {
    let p = tic_last_error_message();
    assert!(!p.is_null(), "an error message is set");
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned()
}

fn config_from(cfg: &RunConfig) -> *mut TicConfig {
    let json = CString::new(serde_json::to_string(cfg).unwrap()).unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(
        unsafe { tic_config_from_json(json.as_ptr(), &mut out) },
        TicStatus::Ok
    );
    out
}

/// Coarse regulator that solves in well under a second.
fn small() -> RunConfig {
    let mut cfg = RunConfig::regulator_preset();
    cfg.grid.x[0].nodes = 21;
    cfg.grid.t_nodes = 41;
    let eq = cfg.equilibrium.as_mut().unwrap();
    eq.n_paths = 2_000;
    eq.points.truncate(1);
    eq.deviations.truncate(1);
    cfg
}

#[test]
fn header_declares_the_api_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/ticontrol.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "tic_config_from_json",
        "tic_solve",
        "tic_solution_copy_value",
        "tic_equilibrium",
        "tic_last_error_message",
        "TIC_STATUS_PANIC",
        "typedef struct TicConfig TicConfig",
    ] {
        assert!(text.contains(name), "{name}");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"ticontrol.h\"\n\
         int main(void) {\n\
           TicConfig *cfg = NULL;\n\
           TicStatus s = tic_config_from_json(\"{}\", &cfg);\n\
           tic_config_free(cfg);\n\
           return s == TIC_STATUS_OK ? 0 : 1;\n\
         }\n",
    )
    .unwrap();
    let out = Command::new("cc")
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(header.parent().unwrap())
        .arg(&src)
        .output()
        .expect("a C compiler is available");
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn null_arguments_are_reported() {
    let mut out = ptr::null_mut();
    let st = unsafe { tic_config_from_json(ptr::null(), &mut out) };
    assert_eq!(st, TicStatus::NullPointer);
    assert_eq!(last_error(), "json is null");
    assert!(out.is_null());
    let st = unsafe { tic_solve(ptr::null(), ptr::null_mut()) };
    assert_eq!(st, TicStatus::NullPointer);
    unsafe {
        tic_config_free(ptr::null_mut());
        tic_solution_free(ptr::null_mut());
        tic_string_free(ptr::null_mut());
    }
}

#[test]
fn malformed_json_is_a_config_error() {
    let json = CString::new("{ \"problem\": ").unwrap();
    let mut out = ptr::null_mut();
    let st = unsafe { tic_config_from_json(json.as_ptr(), &mut out) };
    assert_eq!(st, TicStatus::Config);
    assert!(last_error().contains("line 1"));
}

#[test]
fn config_round_trips_through_json() {
    let cfg = config_from(&small());
    unsafe {
        assert_eq!(tic_config_set_seed(cfg, 7), TicStatus::Ok);
        let mut s = ptr::null_mut();
        assert_eq!(tic_config_to_json(cfg, &mut s), TicStatus::Ok);
        let back = RunConfig::from_json(CStr::from_ptr(s).to_str().unwrap()).unwrap();
        assert_eq!(back.seed, 7);
        tic_string_free(s);
        tic_config_free(cfg);
    }
}

#[test]
fn invalid_regulator_parameters_are_domain_errors() {
    let mut out = ptr::null_mut();
    let bad = TicRegulatorParams {
        sigma: 0.0,
        ..REGULATOR
    };
    let st = unsafe { tic_config_regulator(bad, &mut out) };
    assert_eq!(st, TicStatus::Domain);
    assert!(last_error().contains("sigma"));
    assert_eq!(
        unsafe { tic_config_regulator(REGULATOR, &mut out) },
        TicStatus::Ok
    );
    let mut all_pass = false;
    assert_eq!(unsafe { tic_validate(out, &mut all_pass) }, TicStatus::Ok);
    assert!(all_pass);
    unsafe { tic_config_free(out) };
}

#[test]
fn solve_and_read_back_tables() {
    let cfg = config_from(&small());
    unsafe {
        let mut sol = ptr::null_mut();
        assert_eq!(tic_solve(cfg, &mut sol), TicStatus::Ok);
        let mut converged = false;
        assert_eq!(tic_solution_converged(sol, &mut converged), TicStatus::Ok);
        assert!(converged);
        let (mut nt, mut nx, mut nu) = (0, 0, 0);
        assert_eq!(
            tic_solution_shape(sol, &mut nt, &mut nx, &mut nu),
            TicStatus::Ok
        );
        assert_eq!((nt, nx, nu), (41, 21, 1));

        let mut v = vec![0.0; nt * nx];
        assert_eq!(
            tic_solution_copy_value(sol, v.as_mut_ptr(), v.len() - 1),
            TicStatus::BufferTooSmall
        );
        assert_eq!(
            tic_solution_copy_value(sol, v.as_mut_ptr(), v.len()),
            TicStatus::Ok
        );
        // V(0, x) = σ²T on the interior for the regulator.
        let interior = &v[5..nx - 5];
        assert!(interior.iter().all(|&w| (w - 0.25).abs() < 1e-9));
        let mut u = vec![1.0; nt * nx * nu];
        assert_eq!(
            tic_solution_copy_control(sol, u.as_mut_ptr(), u.len()),
            TicStatus::Ok
        );
        assert!(u.iter().all(|&c| c == 0.0));

        let mut at = 0.0;
        let x = [0.1];
        assert_eq!(
            tic_solution_value_at(sol, 0.5, x.as_ptr(), 1, &mut at),
            TicStatus::Ok
        );
        assert!((at - 0.125).abs() < 1e-9, "{at}");
        assert_eq!(
            tic_solution_value_at(sol, 0.5, x.as_ptr(), 2, &mut at),
            TicStatus::InvalidArgument
        );

        let mut pass = false;
        let mut json = ptr::null_mut();
        assert_eq!(tic_residual(cfg, sol, &mut pass, &mut json), TicStatus::Ok);
        assert!(pass);
        let report: serde_json::Value =
            serde_json::from_str(CStr::from_ptr(json).to_str().unwrap()).unwrap();
        assert_eq!(report["pass"], true);
        tic_string_free(json);

        tic_solution_free(sol);
        tic_config_free(cfg);
    }
}

#[test]
fn closed_form_residual_needs_a_regulator() {
    let cfg = config_from(&small());
    let mut pass = false;
    unsafe {
        assert_eq!(
            tic_residual(cfg, ptr::null(), &mut pass, ptr::null_mut()),
            TicStatus::Ok
        );
        assert!(pass);
        tic_config_free(cfg);
    }
}

#[test]
fn unstable_grid_is_a_stability_error() {
    let mut c = small();
    c.grid.x[0].nodes = 201;
    c.grid.t_nodes = 11;
    let cfg = config_from(&c);
    let mut sol = ptr::null_mut();
    unsafe {
        assert_eq!(tic_solve(cfg, &mut sol), TicStatus::Stability);
        assert!(sol.is_null());
        tic_config_free(cfg);
    }
    assert!(last_error().contains("unstable"));
}

#[test]
fn equilibrium_verdict_and_report() {
    let cfg = config_from(&small());
    let mut verdict = TicVerdict::Fail;
    let mut json = ptr::null_mut();
    unsafe {
        assert_eq!(tic_equilibrium(cfg, &mut verdict, &mut json), TicStatus::Ok);
        assert_eq!(verdict, TicVerdict::Pass);
        let report: serde_json::Value =
            serde_json::from_str(CStr::from_ptr(json).to_str().unwrap()).unwrap();
        assert_eq!(report["verdict"], "pass");
        tic_string_free(json);
        tic_config_free(cfg);
    }
}

#[test]
fn constant_control_values_match_gaussian_moments() {
    let mut v = TicControlValues::default();
    let st = unsafe { tic_regulator_constant_control(REGULATOR, 1.0, 0.5, 0.25, 0.0, &mut v) };
    assert_eq!(st, TicStatus::Ok);
    // X_T ~ N(0.25 − 0.5, 0.125).
    assert_eq!(v.g, -0.25);
    assert_eq!(v.f, 0.0625 + 0.125);
    assert_eq!(v.j, 0.25 + 0.125);
    let st = unsafe { tic_regulator_constant_control(REGULATOR, 2.0, 0.5, 0.0, 0.0, &mut v) };
    assert_eq!(st, TicStatus::Domain);
}

#[test]
fn errors_are_per_thread() {
    let mut out = ptr::null_mut();
    unsafe { tic_config_from_json(ptr::null(), &mut out) };
    let other = std::thread::spawn(|| tic_last_error_message().is_null())
        .join()
        .unwrap();
    assert!(other);
    assert_eq!(last_error(), "json is null");
}

#[test]
fn version_is_static() {
    let v = unsafe { CStr::from_ptr(tic_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
