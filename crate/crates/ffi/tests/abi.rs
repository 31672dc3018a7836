use devfp_ffi::*;
use std::ffi::{c_char, CStr, CString};
use std::ptr;

fn last_error() -> String {
    let mut buf = [0 as c_char; 256];
    unsafe { devfp_last_error(buf.as_mut_ptr(), buf.len()) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }
        .to_string_lossy()
        .into_owned()
}

fn read_string(f: impl Fn(*mut c_char, usize, *mut usize) -> DevfpStatus) -> String {
    let mut needed = 0usize;
    assert_eq!(
        f(ptr::null_mut(), 0, &mut needed),
        DevfpStatus::BufferTooSmall
    );
    let mut buf = vec![0 as c_char; needed];
    assert_eq!(
        f(buf.as_mut_ptr(), buf.len(), ptr::null_mut()),
        DevfpStatus::Ok
    );
    unsafe { CStr::from_ptr(buf.as_ptr()) }
        .to_string_lossy()
        .into_owned()
}

#[test]
fn zoo_ids_round_trip() {
    assert_eq!(devfp_zoo_len(), 30);
    let id = read_string(|b, l, n| unsafe { devfp_zoo_config(0, b, l, n) });
    assert_eq!(id, "ENG-A/BK-A/HW-A");
    assert_eq!(
        unsafe { devfp_zoo_config(30, ptr::null_mut(), 0, ptr::null_mut()) },
        DevfpStatus::InvalidArgument
    );
    assert!(last_error().contains("out of range"));
}

#[test]
fn reductions_match_the_library() {
    let v = vec![0.1f32; 10_000];
    let mut seq = 0.0f32;
    let mut pw = 0.0f32;
    unsafe {
        assert_eq!(
            devfp_reduce(v.as_ptr(), v.len(), DevfpReduction::Sequential, 0, &mut seq),
            DevfpStatus::Ok
        );
        assert_eq!(
            devfp_reduce(v.as_ptr(), v.len(), DevfpReduction::Pairwise, 0, &mut pw),
            DevfpStatus::Ok
        );
        assert_eq!(
            devfp_reduce(v.as_ptr(), 3, DevfpReduction::Blocked, 1, &mut pw),
            DevfpStatus::InvalidArgument
        );
        assert_eq!(
            devfp_reduce(ptr::null(), 0, DevfpReduction::Kahan, 0, &mut pw),
            DevfpStatus::Ok
        );
    }
    use devfp::fpnum::{reduce, AccumulatorSpec, ReductionStrategy};
    assert_eq!(
        seq,
        reduce(&v, ReductionStrategy::Sequential, AccumulatorSpec::F32)
    );
    assert_eq!(pw, 0.0);
    let mut t = 0.0f32;
    unsafe {
        assert_eq!(
            devfp_trace_demo(
                100,
                0.02,
                0.005,
                DevfpReduction::Sequential,
                0,
                true,
                &mut t
            ),
            DevfpStatus::Ok
        );
        assert_eq!(
            devfp_trace_demo(0, 0.02, 0.005, DevfpReduction::Sequential, 0, true, &mut t),
            DevfpStatus::InvalidArgument
        );
    }
}

#[test]
fn bad_arguments_are_reported() {
    let mut sys: *mut DevfpSystem = ptr::null_mut();
    let bogus = CString::new("ENG-Z/BK-A/HW-A").unwrap();
    unsafe {
        assert_eq!(
            devfp_system_new(bogus.as_ptr(), 42, 0.0, &mut sys),
            DevfpStatus::UnknownConfig
        );
        assert!(last_error().contains("ENG-Z"));
        assert_eq!(
            devfp_system_new(ptr::null(), 42, 0.0, &mut sys),
            DevfpStatus::NullPointer
        );
        let ok = CString::new("ENG-A/BK-A/HW-A").unwrap();
        assert_eq!(
            devfp_system_new(ok.as_ptr(), 42, -1.0, &mut sys),
            DevfpStatus::InvalidArgument
        );
        assert!(sys.is_null());
        let invalid = [0xffu8 as c_char, 0];
        assert_eq!(
            devfp_system_new(invalid.as_ptr(), 42, 0.0, &mut sys),
            DevfpStatus::InvalidUtf8
        );
        assert_eq!(devfp_suite_len(ptr::null()), 0);
        devfp_suite_free(ptr::null_mut());
        let name = CString::new("warp-drive").unwrap();
        let dir = CString::new("/nonexistent").unwrap();
        assert_eq!(
            devfp_run_experiment(name.as_ptr(), ptr::null(), dir.as_ptr()),
            DevfpStatus::InvalidArgument
        );
    }
    // Success clears the message.
    assert_eq!(devfp_zoo_len(), 30);
    unsafe { devfp_zoo_config(0, ptr::null_mut(), 0, ptr::null_mut()) };
    let mut n = 0;
    unsafe {
        assert_eq!(
            devfp_zoo_config(1, ptr::null_mut(), 0, &mut n),
            DevfpStatus::BufferTooSmall
        )
    };
    assert_eq!(n, "ENG-A/BK-A/HW-B".len() + 1);
}

#[test]
fn collect_train_fingerprint() {
    unsafe {
        let mut suite: *mut DevfpSuite = ptr::null_mut();
        assert_eq!(
            devfp_suite_generate(20, 40, 0, 0, 7, 42, &mut suite),
            DevfpStatus::Ok,
            "{}",
            last_error()
        );
        assert_eq!(devfp_suite_len(suite), 60);
        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("suite.jsonl").to_str().unwrap()).unwrap();
        assert_eq!(devfp_suite_save(suite, path.as_ptr()), DevfpStatus::Ok);
        let mut loaded: *mut DevfpSuite = ptr::null_mut();
        assert_eq!(
            devfp_suite_load(path.as_ptr(), &mut loaded),
            DevfpStatus::Ok
        );
        assert_eq!(devfp_suite_len(loaded), 60);
        devfp_suite_free(loaded);

        let mut data: *mut DevfpDataset = ptr::null_mut();
        assert_eq!(devfp_dataset_new(&mut data), DevfpStatus::Ok);
        let ids: Vec<CString> = (0..devfp_zoo_len())
            .map(|i| CString::new(read_string(|b, l, n| devfp_zoo_config(i, b, l, n))).unwrap())
            .collect();
        let mut systems = Vec::new();
        for id in &ids {
            let mut s: *mut DevfpSystem = ptr::null_mut();
            assert_eq!(
                devfp_system_new(id.as_ptr(), 42, 0.0, &mut s),
                DevfpStatus::Ok
            );
            assert_eq!(
                devfp_dataset_collect(data, s, suite, 0.0, 1, 0, 2, 1),
                DevfpStatus::Ok,
                "{}",
                last_error()
            );
            systems.push(s);
        }
        assert_eq!(devfp_dataset_len(data), 60);
        let csv = CString::new(dir.path().join("data.csv").to_str().unwrap()).unwrap();
        assert_eq!(devfp_dataset_save(data, csv.as_ptr()), DevfpStatus::Ok);

        let mut forest: *mut DevfpForest = ptr::null_mut();
        assert_eq!(
            devfp_forest_train(data, DevfpAxis::Engine, 25, 3, &mut forest),
            DevfpStatus::Ok
        );
        let json =
            CString::new(read_string(|b, l, n| devfp_forest_to_json(forest, b, l, n))).unwrap();
        let mut copy: *mut DevfpForest = ptr::null_mut();
        assert_eq!(
            devfp_forest_from_json(json.as_ptr(), &mut copy),
            DevfpStatus::Ok
        );

        // Same answer as the library called directly.
        let lib_suite = devfp::prompts::PromptSuite::load(path.to_str().unwrap().as_ref()).unwrap();
        let lib_model = devfp::fingerprint::ForestModel::from_json(json.to_str().unwrap()).unwrap();
        let mut correct = 0;
        for (s, id) in systems.iter().zip(&ids) {
            let label =
                read_string(|b, l, n| devfp_fingerprint(*s, suite, copy, 3, 0.0, 5, b, l, n));
            let cfg = devfp::systems::SystemConfig::parse(id.to_str().unwrap()).unwrap();
            let sys = devfp::systems::instantiate(&cfg, 42).unwrap();
            let votes = devfp::fingerprint::fingerprint_target(
                &sys,
                &lib_suite,
                3,
                std::slice::from_ref(&lib_model),
                0.0,
                5,
            )
            .unwrap();
            assert_eq!(label, votes[&devfp::systems::Axis::Engine].winner);
            correct += usize::from(label == cfg.engine);
        }
        assert!(correct > 15, "{correct}/30");
        let mut n = 0;
        assert_eq!(
            devfp_fingerprint(
                systems[0],
                suite,
                forest,
                0,
                0.0,
                5,
                ptr::null_mut(),
                0,
                &mut n
            ),
            DevfpStatus::InvalidArgument
        );

        for s in systems {
            devfp_system_free(s);
        }
        devfp_forest_free(forest);
        devfp_forest_free(copy);
        devfp_dataset_free(data);
        devfp_suite_free(suite);
    }
}
