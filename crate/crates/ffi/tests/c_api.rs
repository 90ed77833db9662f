use std::ffi::{CStr, CString};
use std::ptr;

use ipls::*;

fn take_string(p: *mut std::ffi::c_char) -> String {
    assert!(!p.is_null());
    let s = unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned();
    unsafe { ipls_string_free(p) };
    s
}

fn last_error() -> String {
    take_string(ipls_last_error_message())
}

#[test]
fn version_is_static() {
    let v = unsafe { CStr::from_ptr(ipls_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn table_walkthrough() {
    let mut table = ptr::null_mut();
    assert_eq!(unsafe { ipls_table_bootstrap(6, 4, 2, 1, &mut table) }, IplsError::Ok);
    let mut buf = [0u32; 8];
    let mut len = 0usize;
    let expected: [&[u32]; 3] = [&[3, 4, 5, 6], &[1, 2, 5, 6], &[]];
    for (agent, want) in (2..=4).zip(expected) {
        let code = unsafe { ipls_table_join(table, agent, buf.as_mut_ptr(), buf.len(), &mut len) };
        assert_eq!(code, IplsError::Ok);
        assert_eq!(&buf[..len], want, "agent {agent}");
    }
    unsafe { ipls_table_lookup(table, 5, buf.as_mut_ptr(), buf.len(), &mut len) };
    assert_eq!(&buf[..len], &[2, 3]);

    let mut text = ptr::null_mut();
    assert_eq!(unsafe { ipls_table_to_text(table, &mut text) }, IplsError::Ok);
    let text = take_string(text);
    assert!(text.starts_with("partition-table k=6 pi=4 rho=2\n"), "{text}");
    assert!(text.contains("agent 1: 1 2 3 4\n"));
    unsafe { ipls_table_free(table) };
}

#[test]
fn short_buffer_leaves_table_untouched() {
    let mut table = ptr::null_mut();
    unsafe { ipls_table_bootstrap(6, 4, 2, 1, &mut table) };
    let mut buf = [0u32; 2];
    let mut len = 0usize;
    let code = unsafe { ipls_table_join(table, 2, buf.as_mut_ptr(), buf.len(), &mut len) };
    assert_eq!(code, IplsError::BufferTooSmall);
    assert_eq!(len, 4);
    let mut full = [0u32; 4];
    let code = unsafe { ipls_table_join(table, 2, full.as_mut_ptr(), 4, &mut len) };
    assert_eq!(code, IplsError::Ok, "retry succeeds since nothing was applied");
    unsafe { ipls_table_free(table) };
}

#[test]
fn errors_are_reported() {
    let mut table = ptr::null_mut();
    assert_eq!(unsafe { ipls_table_bootstrap(2, 3, 1, 1, &mut table) }, IplsError::InvalidArgument);
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { ipls_table_bootstrap(2, 1, 1, 1, ptr::null_mut()) }, IplsError::NullPointer);

    let mut scn = ptr::null_mut();
    let bad = CString::new("agents = lots").unwrap();
    assert_eq!(unsafe { ipls_scenario_from_config(bad.as_ptr(), &mut scn) }, IplsError::Config);
    assert!(last_error().contains("agents"));
    let name = CString::new("no-such-preset").unwrap();
    assert_eq!(unsafe { ipls_scenario_from_preset(name.as_ptr(), 0, &mut scn) }, IplsError::InvalidArgument);
    unsafe {
        ipls_scenario_free(ptr::null_mut());
        ipls_run_free(ptr::null_mut());
        ipls_table_free(ptr::null_mut());
        ipls_string_free(ptr::null_mut());
    }
}

#[test]
fn scenario_runs_and_reports_csv() {
    let name = CString::new("oracle-4").unwrap();
    assert_eq!(unsafe { ipls_preset_variant_count(name.as_ptr()) }, 1);
    let mut scn = ptr::null_mut();
    assert_eq!(unsafe { ipls_scenario_from_preset(name.as_ptr(), 0, &mut scn) }, IplsError::Ok);
    let key = CString::new("rounds").unwrap();
    let value = CString::new("3").unwrap();
    assert_eq!(unsafe { ipls_scenario_set(scn, key.as_ptr(), value.as_ptr()) }, IplsError::Ok);
    let bogus = CString::new("bogus").unwrap();
    assert_eq!(unsafe { ipls_scenario_set(scn, bogus.as_ptr(), value.as_ptr()) }, IplsError::Config);

    let mut text = ptr::null_mut();
    assert_eq!(unsafe { ipls_scenario_to_text(scn, &mut text) }, IplsError::Ok);
    assert!(take_string(text).contains("rounds = 3\n"));

    let mut run = ptr::null_mut();
    assert_eq!(unsafe { ipls_scenario_run(scn, &mut run) }, IplsError::Ok);
    assert_eq!(unsafe { ipls_run_round_count(run) }, 4);
    let mut acc = f64::NAN;
    assert_eq!(unsafe { ipls_run_final_accuracy(run, &mut acc) }, IplsError::Ok);
    assert!((0.0..=1.0).contains(&acc));
    let mut csv = ptr::null_mut();
    assert_eq!(unsafe { ipls_run_csv(run, &mut csv) }, IplsError::Ok);
    let csv = take_string(csv);
    assert!(csv.starts_with("round,agent_id,accuracy,loss,bytes_sent,bytes_received,epsilon_mean,event\n"));
    assert_eq!(csv.lines().count(), 5);
    unsafe {
        ipls_run_free(run);
        ipls_scenario_free(scn);
    }
}
