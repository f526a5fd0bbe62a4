use std::ffi::{c_char, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use vrmsac_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0u8; vrmsac_last_error_length() + 1];
    let n = unsafe { vrmsac_last_error_message(buf.as_mut_ptr().cast::<c_char>(), buf.len()) };
    assert!(n >= 0);
    String::from_utf8(buf[..n as usize].to_vec()).unwrap()
}

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

const TINY: &str = "env = pendulum
variant = novel
total_steps = 60
step_start_rl = 30
fi_epochs = 2
eval_interval = 60
eval_episodes = 1
d_size = 8
z_size = 2
model_hidden = 8
feature_size = 8
rl_hidden = 16,16
seq_len = 8
batch_size = 2
burn_in_max = 4
";

#[test]
fn env_lifecycle() {
    unsafe {
        let mut env: *mut VrmsacEnv = ptr::null_mut();
        assert_eq!(vrmsac_env_new(c("cartpole").as_ptr(), c("full").as_ptr(), 3, &mut env), VrmsacStatus::Ok);
        let (mut od, mut ad) = (0usize, 0usize);
        assert_eq!(vrmsac_env_dims(env, &mut od, &mut ad), VrmsacStatus::Ok);
        assert_eq!((od, ad), (4, 1));
        let mut obs = vec![0.0; od];
        let (mut r, mut done) = (0.0, false);
        let a = [0.5];
        // stepping before reset is a usage error
        assert_eq!(
            vrmsac_env_step(env, a.as_ptr(), 1, obs.as_mut_ptr(), od, &mut r, &mut done),
            VrmsacStatus::Usage
        );
        assert!(last_error().contains("reset"));
        assert_eq!(vrmsac_env_reset(env, obs.as_mut_ptr(), od), VrmsacStatus::Ok);
        let mut steps = 0;
        while !done {
            assert_eq!(
                vrmsac_env_step(env, a.as_ptr(), 1, obs.as_mut_ptr(), od, &mut r, &mut done),
                VrmsacStatus::Ok
            );
            assert!(r.is_finite());
            steps += 1;
        }
        assert!(steps > 0 && steps <= 1000);
        assert_eq!(last_error(), "");
        vrmsac_env_free(env);
        vrmsac_env_free(ptr::null_mut());
    }
}

#[test]
fn bad_arguments_map_to_codes() {
    unsafe {
        let mut env: *mut VrmsacEnv = ptr::null_mut();
        assert_eq!(vrmsac_env_new(c("nope").as_ptr(), c("full").as_ptr(), 0, &mut env), VrmsacStatus::Config);
        assert!(env.is_null());
        assert!(last_error().contains("nope"));
        assert_eq!(vrmsac_env_new(ptr::null(), c("full").as_ptr(), 0, &mut env), VrmsacStatus::NullPointer);
        assert_eq!(
            vrmsac_env_new(c("pendulum").as_ptr(), c("full").as_ptr(), 0, ptr::null_mut()),
            VrmsacStatus::NullPointer
        );
        assert_eq!(vrmsac_env_new(c("pendulum").as_ptr(), c("full").as_ptr(), 0, &mut env), VrmsacStatus::Ok);
        let mut obs = vec![0.0; 2];
        assert_eq!(vrmsac_env_reset(env, obs.as_mut_ptr(), 2), VrmsacStatus::InvalidArgument);
        assert!(last_error().contains("expected 3"));
        vrmsac_env_free(env);

        let mut n = 0u64;
        assert_eq!(vrmsac_count_params(c("bogus = 1").as_ptr(), &mut n), VrmsacStatus::Config);
        let mut agent: *mut VrmsacAgent = ptr::null_mut();
        assert_eq!(vrmsac_agent_load(c("/nonexistent/ck").as_ptr(), &mut agent), VrmsacStatus::Io);
        assert!(agent.is_null());
    }
}

#[test]
fn error_message_truncates_and_terminates() {
    unsafe {
        let mut env: *mut VrmsacEnv = ptr::null_mut();
        vrmsac_env_new(c("nope").as_ptr(), c("full").as_ptr(), 0, &mut env);
        let mut buf = [1 as c_char; 6];
        assert_eq!(vrmsac_last_error_message(buf.as_mut_ptr(), 6), 5);
        assert_eq!(buf[5], 0);
        assert_eq!(vrmsac_last_error_message(buf.as_mut_ptr(), 0), -1);
        assert_eq!(vrmsac_last_error_message(ptr::null_mut(), 6), -1);
    }
}

#[test]
fn count_params_matches_default_architecture() {
    let mut n = 0u64;
    let status = unsafe { vrmsac_count_params(c("obs_dim = 6\naction_dim = 3\n").as_ptr(), &mut n) };
    assert_eq!(status, VrmsacStatus::Ok);
    let rel = (n as f64 - 2.8e6).abs() / 2.8e6;
    assert!(rel < 0.15, "{n}");
}

#[test]
fn train_then_load_and_act() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    unsafe {
        let status = vrmsac_train(c(TINY).as_ptr(), c(out.to_str().unwrap()).as_ptr());
        assert_eq!(status, VrmsacStatus::Ok, "{}", last_error());
        let ck = c(out.join("resume.ckpt").to_str().unwrap());
        let mut agent: *mut VrmsacAgent = ptr::null_mut();
        assert_eq!(vrmsac_agent_load(ck.as_ptr(), &mut agent), VrmsacStatus::Ok, "{}", last_error());
        let (mut od, mut ad) = (0usize, 0usize);
        assert_eq!(vrmsac_agent_dims(agent, &mut od, &mut ad), VrmsacStatus::Ok);
        assert_eq!((od, ad), (2, 1));
        let mut count = 0u64;
        assert_eq!(vrmsac_agent_param_count(agent, &mut count), VrmsacStatus::Ok);
        assert!(count > 0);

        let obs = [0.3, -0.2];
        let mut a1 = [0.0];
        let mut a2 = [0.0];
        assert_eq!(vrmsac_agent_reset(agent, 1), VrmsacStatus::Ok);
        assert_eq!(vrmsac_agent_act(agent, obs.as_ptr(), 2, 0.0, true, a1.as_mut_ptr(), 1), VrmsacStatus::Ok);
        assert!(a1[0].abs() <= 2.0);
        // belief updates sample latents, so equal actions need an equal reseed
        assert_eq!(vrmsac_agent_reset(agent, 1), VrmsacStatus::Ok);
        assert_eq!(vrmsac_agent_act(agent, obs.as_ptr(), 2, 0.0, true, a2.as_mut_ptr(), 1), VrmsacStatus::Ok);
        assert_eq!(a1, a2);
        assert_eq!(
            vrmsac_agent_act(agent, obs.as_ptr(), 1, 0.0, true, a2.as_mut_ptr(), 1),
            VrmsacStatus::InvalidArgument
        );
        vrmsac_agent_free(agent);
    }
}

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/vrmsac.h")
}

const C_PROGRAM: &str = r#"#include "vrmsac.h"
#include <stdio.h>

int main(void) {
    VrmsacEnv *env = NULL;
    if (vrmsac_env_new("pendulum", "full", 1, &env) != VRMSAC_STATUS_OK) return 1;
    double obs[3];
    if (vrmsac_env_reset(env, obs, 3) != VRMSAC_STATUS_OK) return 2;
    double a = 1.0, r = 0.0;
    bool done = false;
    if (vrmsac_env_step(env, &a, 1, obs, 3, &r, &done) != VRMSAC_STATUS_OK) return 3;
    vrmsac_env_free(env);
    if (vrmsac_env_new("nope", "full", 1, &env) != VRMSAC_STATUS_CONFIG) return 4;
    char msg[256];
    if (vrmsac_last_error_message(msg, sizeof msg) <= 0) return 5;
    printf("ok %f\n", r);
    return 0;
}
"#;

#[test]
fn header_is_valid_c() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let include = header().parent().unwrap().to_path_buf();
    let status = match Command::new("cc")
        .args(["-std=c11", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&include)
        .arg(&src)
        .status()
    {
        Ok(s) => s,
        Err(_) => {
            eprintln!("no C compiler found; skipping");
            return;
        }
    };
    assert!(status.success());
}

/// Link the static library into the C program and run it, when cargo has
/// produced the archive next to this test binary.
#[test]
fn c_program_runs_against_static_library() {
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(Path::parent).unwrap();
    let lib = profile_dir.join("libvrmsac_ffi.a");
    if !lib.exists() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("static library or C compiler unavailable; skipping");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    let bin = dir.path().join("main");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let status = Command::new("cc")
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "{out:?}");
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
