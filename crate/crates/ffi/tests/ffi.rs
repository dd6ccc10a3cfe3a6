use std::ffi::{c_char, CStr, CString};
use std::process::Command;
use std::ptr;

use rlaas_ffi::*;

fn text(buf: &[u8], needed: usize) -> String {
    String::from_utf8_lossy(&buf[..needed - 1]).into_owned()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(rlaas_last_error()).to_string_lossy().into_owned() }
}

#[test]
fn env_episode_through_the_abi() {
    unsafe {
        let mut env = ptr::null_mut();
        let kind = CString::new("arith").unwrap();
        assert_eq!(rlaas_env_new(kind.as_ptr(), &mut env), RlaasStatus::RlaasOk);
        let mut buf = [0u8; 64];
        let mut needed = 0;
        let st = rlaas_env_reset(env, 7, buf.as_mut_ptr().cast(), buf.len(), &mut needed);
        assert_eq!(st, RlaasStatus::RlaasOk);
        let prompt = text(&buf, needed);
        let (a, b) = prompt.trim_end_matches('=').split_once('+').unwrap();
        let answer = CString::new((a.parse::<u32>().unwrap() + b.parse::<u32>().unwrap()).to_string()).unwrap();
        let (mut score, mut done) = (0.0, 0);
        let st = rlaas_env_step(env, answer.as_ptr(), &mut score, &mut done, buf.as_mut_ptr().cast(), buf.len(), &mut needed);
        assert_eq!(st, RlaasStatus::RlaasOk);
        assert_eq!((score, done), (1.0, 1));
        let st = rlaas_env_step(env, answer.as_ptr(), &mut score, &mut done, buf.as_mut_ptr().cast(), buf.len(), &mut needed);
        assert_eq!(st, RlaasStatus::RlaasEnvError);
        assert!(!last_error().is_empty());
        rlaas_env_free(env);
    }
}

#[test]
fn errors_are_codes_not_crashes() {
    unsafe {
        let mut env = ptr::null_mut();
        let bad = CString::new("chess").unwrap();
        assert_eq!(rlaas_env_new(bad.as_ptr(), &mut env), RlaasStatus::RlaasInvalidArgument);
        assert!(last_error().contains("chess"));
        assert_eq!(rlaas_env_new(ptr::null(), &mut env), RlaasStatus::RlaasNullPointer);
        assert_eq!(rlaas_env_reset(ptr::null_mut(), 0, ptr::null_mut(), 0, ptr::null_mut()), RlaasStatus::RlaasNullPointer);
        let missing = CString::new("/nonexistent/store").unwrap();
        let mut policy = ptr::null_mut();
        assert_eq!(rlaas_policy_load(missing.as_ptr(), -1, &mut policy), RlaasStatus::RlaasCheckpointError);
        let frame = CString::new("{\"id\":1}").unwrap();
        let mut needed = 0;
        let st = rlaas_protocol_canonicalize(frame.as_ptr(), ptr::null_mut(), 0, &mut needed);
        assert_eq!(st, RlaasStatus::RlaasProtocolError);
    }
}

#[test]
fn policy_generation_and_small_buffers() {
    unsafe {
        let mut policy = ptr::null_mut();
        assert_eq!(rlaas_policy_new(8, &mut policy), RlaasStatus::RlaasOk);
        let prompt = CString::new("3+4=").unwrap();
        let mut needed = 0;
        let st = rlaas_policy_generate(policy, prompt.as_ptr(), 4, 1, 9, ptr::null_mut(), 0, &mut needed);
        assert_eq!(st, RlaasStatus::RlaasBufferTooSmall);
        let mut buf = vec![0u8; needed];
        let st = rlaas_policy_generate(policy, prompt.as_ptr(), 4, 1, 9, buf.as_mut_ptr().cast::<c_char>(), buf.len(), &mut needed);
        assert_eq!(st, RlaasStatus::RlaasOk);
        let mut again = vec![0u8; needed];
        rlaas_policy_generate(policy, prompt.as_ptr(), 4, 1, 9, again.as_mut_ptr().cast(), again.len(), &mut needed);
        assert_eq!(buf, again);
        rlaas_policy_free(policy);
        rlaas_policy_free(ptr::null_mut());
    }
}

#[test]
fn frames_are_canonicalized() {
    unsafe {
        let frame = CString::new(r#"{"payload":{"job_id":"j"},"kind":"heartbeat","id":3}"#).unwrap();
        let mut buf = [0u8; 128];
        let mut needed = 0;
        let st = rlaas_protocol_canonicalize(frame.as_ptr(), buf.as_mut_ptr().cast(), buf.len(), &mut needed);
        assert_eq!(st, RlaasStatus::RlaasOk);
        let out = text(&buf, needed);
        assert!(out.contains("\"kind\":\"heartbeat\"") && out.ends_with('\n'));
    }
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/rlaas.h");
    let text = std::fs::read_to_string(header).unwrap();
    for f in ["rlaas_last_error", "rlaas_policy_generate", "rlaas_env_step", "rlaas_protocol_canonicalize", "RLAAS_BUFFER_TOO_SMALL"] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(&src, "#include \"rlaas.h\"\nint main(void) { RlaasPolicy *p = 0; return rlaas_policy_new(8, &p) == RLAAS_OK ? 0 : 1; }\n").unwrap();
    let inc = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    match Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror", "-I", inc]).arg(&src).output() {
        Ok(out) => assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr)),
        Err(_) => eprintln!("no C compiler; syntax check skipped"),
    }
}
