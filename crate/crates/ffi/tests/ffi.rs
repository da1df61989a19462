use std::ffi::{c_char, CStr, CString};
use std::ptr;

use fedmoe_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    unsafe {
        fm_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn synthetic() -> (*mut FmDataset, *mut FmDataset) {
    let (mut train, mut test) = (ptr::null_mut(), ptr::null_mut());
    let st = unsafe { fm_dataset_synthetic(10, 20, 5, 1, 0.1, 3, &mut train, &mut test) };
    assert_eq!(st, FmStatus::Ok);
    (train, test)
}

fn mlp(seed: u64) -> *mut FmModel {
    let mut m = ptr::null_mut();
    let hidden = [32usize];
    assert_eq!(unsafe { fm_model_mlp(1, hidden.as_ptr(), 1, 10, seed, &mut m) }, FmStatus::Ok);
    m
}

fn fed_config(rounds: usize) -> FmFedConfig {
    FmFedConfig {
        rounds,
        participation: 0.5,
        local_epochs: 2,
        local_batch: 10,
        learning_rate: 0.05,
        momentum: 0.5,
        weight_decay: 0.0,
        uniform_weighting: 0,
        seed: 5,
        workers: 1,
    }
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(fm_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn dataset_and_model_basics() {
    let (train, test) = synthetic();
    unsafe {
        assert_eq!(fm_dataset_len(train), 200);
        assert_eq!(fm_dataset_len(test), 50);
        assert_eq!(fm_dataset_classes(train), 10);
        assert_eq!(fm_dataset_len(ptr::null()), 0);

        let mut lenet = ptr::null_mut();
        assert_eq!(fm_model_lenet5(1, 10, 0, &mut lenet), FmStatus::Ok);
        assert_eq!(fm_model_param_count(lenet), 61706);
        fm_model_free(lenet);

        let m = mlp(1);
        let mut acc = -1.0;
        assert_eq!(fm_model_accuracy(m, test, &mut acc), FmStatus::Ok);
        assert!((0.0..=1.0).contains(&acc));
        let images = vec![0.0; 2 * 1024];
        let mut labels = [99u32; 2];
        assert_eq!(fm_model_predict(m, images.as_ptr(), 2, labels.as_mut_ptr()), FmStatus::Ok);
        assert!(labels.iter().all(|&l| l < 10));
        fm_model_free(m);
        fm_dataset_free(train);
        fm_dataset_free(test);
    }
}

#[test]
fn null_arguments_report_status_and_message() {
    unsafe {
        let st = fm_model_lenet5(1, 10, 0, ptr::null_mut());
        assert_eq!(st, FmStatus::NullPointer);
        assert!(last_error().contains("out_model"));
        let mut acc = 0.0;
        assert_eq!(fm_model_accuracy(ptr::null(), ptr::null(), &mut acc), FmStatus::NullPointer);
        // Freeing null is a no-op.
        fm_model_free(ptr::null_mut());
        fm_dataset_free(ptr::null_mut());
        fm_partition_free(ptr::null_mut());
        fm_client_free(ptr::null_mut());
    }
}

#[test]
fn library_errors_map_to_status_codes() {
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(fm_model_mlp(1, ptr::null(), 0, 0, 0, &mut m), FmStatus::Config);
        assert!(!last_error().is_empty());

        let img = CString::new("/nonexistent/images").unwrap();
        let lab = CString::new("/nonexistent/labels").unwrap();
        let mut ds = ptr::null_mut();
        assert_eq!(fm_dataset_load_idx(img.as_ptr(), lab.as_ptr(), &mut ds), FmStatus::Io);
        assert!(last_error().contains("/nonexistent/images"));

        let (train, _test) = synthetic();
        let mut p = ptr::null_mut();
        assert_eq!(fm_partition_dirichlet(train, 1000, 0.5, 0, &mut p), FmStatus::Config);
    }
}

#[test]
fn last_error_truncates_and_reports_length() {
    unsafe {
        fm_model_lenet5(1, 10, 0, ptr::null_mut());
        let full = fm_last_error(ptr::null_mut(), 0);
        let mut small = [1 as c_char; 4];
        assert_eq!(fm_last_error(small.as_mut_ptr(), 4), full);
        assert_eq!(small[3], 0);
        assert_eq!(CStr::from_ptr(small.as_ptr()).to_bytes().len(), 3);
    }
}

#[test]
fn partition_accessors_cover_the_dataset() {
    let (train, _) = synthetic();
    unsafe {
        let mut p = ptr::null_mut();
        assert_eq!(fm_partition_dirichlet(train, 4, 0.5, 1, &mut p), FmStatus::Ok);
        assert_eq!(fm_partition_num_clients(p), 4);
        let mut seen = Vec::new();
        for c in 0..4 {
            let mut n = 0;
            assert_eq!(fm_partition_client_size(p, c, &mut n), FmStatus::Ok);
            assert!(n > 0);
            let mut buf = vec![0usize; n];
            assert_eq!(fm_partition_client_indices(p, c, buf.as_mut_ptr(), n), FmStatus::Ok);
            if n > 1 {
                assert_eq!(fm_partition_client_indices(p, c, buf.as_mut_ptr(), n - 1), FmStatus::InvalidArgument);
            }
            seen.extend(buf);
        }
        seen.sort_unstable();
        assert_eq!(seen, (0..200).collect::<Vec<_>>());
        let mut n = 0;
        assert_eq!(fm_partition_client_size(p, 4, &mut n), FmStatus::InvalidArgument);
        fm_partition_free(p);
    }
}

#[test]
fn fedavg_personalize_and_checkpoint_round_trip() {
    let (train, test) = synthetic();
    let dir = tempfile::tempdir().unwrap();
    unsafe {
        let mut p = ptr::null_mut();
        assert_eq!(fm_partition_dirichlet(train, 4, 0.5, 2, &mut p), FmStatus::Ok);
        let like = mlp(0);
        let mut global = ptr::null_mut();
        let mut best = 0.0;
        let cfg = fed_config(5);
        assert_eq!(fm_fedavg_train(train, test, p, like, &cfg, &mut global, &mut best), FmStatus::Ok, "{}", last_error());
        let mut acc = 0.0;
        fm_model_accuracy(global, test, &mut acc);
        assert_eq!(acc, best);
        assert!(best > 0.5, "best {best}");

        let path = CString::new(dir.path().join("g.fmck").to_str().unwrap()).unwrap();
        assert_eq!(fm_model_save(global, path.as_ptr()), FmStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(fm_model_load(path.as_ptr(), &mut loaded), FmStatus::Ok);
        let mut again = 0.0;
        fm_model_accuracy(loaded, test, &mut again);
        assert_eq!(again, best);

        for (alg, gated) in [
            (FmAlgorithm::Local, false),
            (FmAlgorithm::PflFt, false),
            (FmAlgorithm::PflFb, false),
            (FmAlgorithm::PflMf, true),
            (FmAlgorithm::PflMfe, true),
        ] {
            let pc = FmPersonalizeConfig {
                algorithm: alg,
                epochs: 3,
                learning_rate: 0.01,
                gate_lr: 0.01,
                batch_size: 16,
                split_ratio: 0.8,
                momentum: 0.9,
                weight_decay: 5e-4,
                seed: 1,
            };
            let mut client = ptr::null_mut();
            assert_eq!(fm_personalize(loaded, train, p, 1, &pc, &mut client), FmStatus::Ok, "{}", last_error());
            let (mut local, mut glob) = (-1.0, -1.0);
            assert_eq!(fm_client_accuracy(client, test, &mut local, &mut glob), FmStatus::Ok);
            assert!((0.0..=1.0).contains(&local) && (0.0..=1.0).contains(&glob));
            let g = fm_client_mean_gate(client);
            assert_eq!(g > 0.0 && g < 1.0, gated, "{alg:?}: {g}");
            let images = vec![0.5; 1024];
            let mut label = 99u32;
            assert_eq!(fm_client_predict(client, images.as_ptr(), 1, &mut label), FmStatus::Ok);
            assert!(label < 10);
            fm_client_free(client);
        }

        let mut bad = fed_config(1);
        bad.participation = 0.0;
        let mut none = ptr::null_mut();
        assert_eq!(fm_fedavg_train(train, test, p, like, &bad, &mut none, &mut best), FmStatus::Config);
        assert!(none.is_null());

        fm_model_free(like);
        fm_model_free(global);
        fm_model_free(loaded);
        fm_partition_free(p);
        fm_dataset_free(train);
        fm_dataset_free(test);
    }
}

#[test]
fn header_compiles_as_c() {
    let include = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    let header = std::fs::read_to_string(format!("{include}/fedmoe.h")).unwrap();
    for name in ["fm_fedavg_train", "fm_personalize", "fm_last_error", "FM_STATUS_OK", "FmModel"] {
        assert!(header.contains(name), "{name} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"fedmoe.h\"\nint main(void) { FmModel *m = 0; FmStatus s = fm_model_lenet5(1, 10, 0, &m); fm_model_free(m); return (int)s; }\n",
    )
    .unwrap();
    let Ok(out) = std::process::Command::new("cc").arg("-fsyntax-only").arg("-I").arg(include).arg(&src).output() else {
        eprintln!("no C compiler found; header syntax check skipped");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
