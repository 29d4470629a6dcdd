use std::ffi::{CStr, CString};
use std::ptr;

use unbuild_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(ub_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn build_a_three_cube_tower_through_the_abi() {
    unsafe {
        let mut cat = ptr::null_mut();
        assert_eq!(ub_category_tower(3, &mut cat), UbStatus::Ok);
        let mut n = 0;
        assert_eq!(ub_category_instance_count(cat, &mut n), UbStatus::Ok);
        assert_eq!(n, 1);

        let mut s = ptr::null_mut();
        assert_eq!(ub_state_scatter(cat, 7, &mut s), UbStatus::Ok);
        let mut count = 0;
        assert_eq!(ub_state_primitive_count(s, &mut count), UbStatus::Ok);
        assert_eq!(count, 3);

        // The tower is stacked bottom-up in palette order; pick the cube of
        // the right color each time.
        let mut json = ptr::null_mut();
        assert_eq!(ub_state_to_json(s, &mut json), UbStatus::Ok);
        let text = CStr::from_ptr(json).to_str().unwrap().to_owned();
        ub_string_free(json);
        let state = unbuild::WorldState::from_json(&text).unwrap();
        let cat_rs = unbuild::Category::tower(3).unwrap();
        let mut cur = s;
        let mut st = state;
        for _ in 0..3 {
            let a = cat_rs.goal_actions(&st)[0].clone();
            let ua = UbAction {
                pick_id: a.pick_id,
                x: a.place_position[0],
                y: a.place_position[1],
                z: a.place_position[2],
                orientation: a.orientation.index() as u32,
            };
            let mut next = ptr::null_mut();
            assert_eq!(ub_state_apply(cur, &ua, &mut next), UbStatus::Ok, "{}", last_error());
            ub_state_free(cur);
            cur = next;
            st = st.apply_action(&a).unwrap();
        }
        let mut ok = false;
        assert_eq!(ub_classify(cat, cur, 1, &mut ok), UbStatus::Ok);
        assert!(ok);
        ub_state_free(cur);
        ub_category_free(cat);
    }
}

#[test]
fn actions_buffer_protocol() {
    unsafe {
        let mut cat = ptr::null_mut();
        assert_eq!(ub_category_arch(3, &mut cat), UbStatus::Ok);
        let mut s = ptr::null_mut();
        assert_eq!(ub_state_scatter(cat, 1, &mut s), UbStatus::Ok);
        let mut n = 0;
        assert_eq!(ub_state_actions(s, ptr::null_mut(), 0, &mut n), UbStatus::BufferTooSmall);
        assert!(n > 0);
        let mut buf = vec![UbAction::default(); n];
        assert_eq!(ub_state_actions(s, buf.as_mut_ptr(), buf.len(), &mut n), UbStatus::Ok);
        let mut next = ptr::null_mut();
        assert_eq!(ub_state_apply(s, &buf[0], &mut next), UbStatus::Ok);
        ub_state_free(next);
        ub_state_free(s);
        ub_category_free(cat);
    }
}

#[test]
fn errors_are_reported_with_codes_and_messages() {
    unsafe {
        let mut cat = ptr::null_mut();
        assert_eq!(ub_category_arch(9, &mut cat), UbStatus::InvalidArgument);
        assert!(!last_error().is_empty());
        assert_eq!(ub_category_arch(3, ptr::null_mut()), UbStatus::NullPointer);

        let bad = CString::new("{not json").unwrap();
        let mut s = ptr::null_mut();
        assert_eq!(ub_state_from_json(bad.as_ptr(), &mut s), UbStatus::InvalidState);
        assert!(s.is_null());

        assert_eq!(ub_category_arch(3, &mut cat), UbStatus::Ok);
        assert!(last_error().is_empty());
        assert_eq!(ub_state_scatter(cat, 0, &mut s), UbStatus::Ok);
        let wild = UbAction { pick_id: 0, x: 7.5, y: 11.5, z: 6.5, orientation: 0 };
        let mut next = ptr::null_mut();
        assert_eq!(ub_state_apply(s, &wild, &mut next), UbStatus::InvalidAction);
        let bad_o = UbAction { orientation: 5, ..wild };
        assert_eq!(ub_state_apply(s, &bad_o, &mut next), UbStatus::InvalidArgument);

        let missing = CString::new("/nonexistent/net.ubvn").unwrap();
        let mut net = ptr::null_mut();
        assert_eq!(ub_net_load(missing.as_ptr(), &mut net), UbStatus::Io);
        ub_state_free(s);
        ub_category_free(cat);
        // Freeing null is a no-op.
        ub_state_free(ptr::null_mut());
        ub_net_free(ptr::null_mut());
    }
}

#[test]
fn network_round_trip_and_greedy_action() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ubvn");
    unbuild::value::ValueNet::new(unbuild::value::ENCODING_DIM, 0.95, 3).save(&path).unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    unsafe {
        let mut net = ptr::null_mut();
        assert_eq!(ub_net_load(cpath.as_ptr(), &mut net), UbStatus::Ok, "{}", last_error());
        let mut fresh = ptr::null_mut();
        assert_eq!(ub_net_new(0.95, 3, &mut fresh), UbStatus::Ok);
        let mut cat = ptr::null_mut();
        ub_category_arch(3, &mut cat);
        let mut s = ptr::null_mut();
        ub_state_scatter(cat, 4, &mut s);
        let (mut v1, mut v2) = (0.0, 0.0);
        assert_eq!(ub_net_value(net, s, &mut v1), UbStatus::Ok);
        assert_eq!(ub_net_value(fresh, s, &mut v2), UbStatus::Ok);
        // Checkpoints store f32 parameters.
        assert!((v1 - v2).abs() < 1e-5, "{v1} vs {v2}");
        let mut a = UbAction::default();
        assert_eq!(ub_net_greedy_action(net, s, &mut a), UbStatus::Ok);
        let mut next = ptr::null_mut();
        assert_eq!(ub_state_apply(s, &a, &mut next), UbStatus::Ok);
        for p in [next, s] {
            ub_state_free(p);
        }
        ub_net_free(net);
        ub_net_free(fresh);
        ub_category_free(cat);

        let bad = dir.path().join("bad.ubvn");
        std::fs::write(&bad, b"nope").unwrap();
        let cbad = CString::new(bad.to_str().unwrap()).unwrap();
        let mut n2 = ptr::null_mut();
        assert_eq!(ub_net_load(cbad.as_ptr(), &mut n2), UbStatus::Checkpoint);
    }
}

#[test]
fn header_declares_the_api() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/unbuild.h")).unwrap();
    for name in ["ub_last_error", "ub_state_apply", "ub_net_load", "ub_net_greedy_action", "UB_STATUS_OK", "UbAction"] {
        assert!(h.contains(name), "missing {name}");
    }
    // Compile-check the header when a C compiler is present.
    if let Ok(st) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-x", "c", "-"])
        .stdin(std::process::Stdio::piped())
        .spawn()
        .and_then(|mut c| {
            use std::io::Write;
            let inc = format!("#include \"{}/include/unbuild.h\"\nint main(void) {{ return UB_STATUS_OK; }}\n", env!("CARGO_MANIFEST_DIR"));
            c.stdin.take().unwrap().write_all(inc.as_bytes())?;
            c.wait()
        })
    {
        assert!(st.success());
    }
}
