use std::ffi::{c_char, CStr, CString};
use std::process::Command;
use std::ptr;

use densefocus_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { df_last_error_message(buf.as_mut_ptr(), buf.len()) };
    assert!(n > 0);
    unsafe { CStr::from_ptr(buf.as_ptr()) }
        .to_string_lossy()
        .into_owned()
}

fn focal(gamma: f64) -> DfLossConfig {
    DfLossConfig {
        kind: DfLossKind::Focal,
        gamma,
        alpha: 0.0,
        has_alpha: 0,
        beta: 0.0,
    }
}

#[test]
fn version_is_nul_terminated() {
    let v = unsafe { CStr::from_ptr(df_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn focal_loss_matches_closed_form() {
    let cfg = focal(2.0);
    let mut v = 0.0;
    assert_eq!(unsafe { df_loss_value(1.0, 1, &cfg, &mut v) }, DfStatus::Ok);
    let p = 1.0 / (1.0 + (-1.0f64).exp());
    let expected = -(1.0 - p).powi(2) * p.ln();
    assert!((v - expected).abs() < 1e-12, "{v} vs {expected}");

    let mut g = 0.0;
    assert_eq!(unsafe { df_loss_grad(1.0, 1, &cfg, &mut g) }, DfStatus::Ok);
    let h = 1e-6;
    let (mut a, mut b) = (0.0, 0.0);
    unsafe {
        df_loss_value(1.0 + h, 1, &cfg, &mut a);
        df_loss_value(1.0 - h, 1, &cfg, &mut b);
    }
    assert!((g - (a - b) / (2.0 * h)).abs() < 1e-7);
}

#[test]
fn bad_label_and_null_pointers_report_errors() {
    let cfg = focal(2.0);
    let mut v = 0.0;
    assert_eq!(
        unsafe { df_loss_value(0.0, 0, &cfg, &mut v) },
        DfStatus::InvalidArgument
    );
    assert!(!last_error().is_empty());
    assert_eq!(
        unsafe { df_loss_value(0.0, 1, ptr::null(), &mut v) },
        DfStatus::NullPointer
    );
    assert!(last_error().contains("cfg"));
    assert_eq!(
        unsafe { df_sigmoid(0.0, ptr::null_mut()) },
        DfStatus::NullPointer
    );
}

#[test]
fn negative_gamma_is_invalid_config() {
    let cfg = focal(-1.0);
    let mut v = 0.0;
    assert_eq!(
        unsafe { df_loss_value(0.0, 1, &cfg, &mut v) },
        DfStatus::InvalidConfig
    );
}

#[test]
fn error_message_truncates() {
    let mut v = 0.0;
    unsafe { df_loss_value(0.0, 1, ptr::null(), &mut v) };
    let mut buf = [1 as c_char; 4];
    let n = unsafe { df_last_error_message(buf.as_mut_ptr(), buf.len()) };
    assert!(n > 3);
    assert_eq!(buf[3], 0);
}

#[test]
fn geometry_round_trip() {
    let a = DfBox {
        x1: 0.0,
        y1: 0.0,
        x2: 10.0,
        y2: 10.0,
    };
    let g = DfBox {
        x1: 2.0,
        y1: 1.0,
        x2: 14.0,
        y2: 9.0,
    };
    let mut t = DfRegressionTarget::default();
    let mut back = DfBox::default();
    unsafe {
        assert_eq!(df_encode(&a, &g, &mut t), DfStatus::Ok);
        assert_eq!(df_decode(&a, &t, &mut back), DfStatus::Ok);
    }
    for (x, y) in [
        (back.x1, g.x1),
        (back.y1, g.y1),
        (back.x2, g.x2),
        (back.y2, g.y2),
    ] {
        assert!((x - y).abs() < 1e-9);
    }
    let mut iou = 0.0;
    assert_eq!(unsafe { df_iou(&a, &a, &mut iou) }, DfStatus::Ok);
    assert_eq!(iou, 1.0);
    let bad = DfBox {
        x1: 5.0,
        y1: 0.0,
        x2: 1.0,
        y2: 1.0,
    };
    assert_ne!(unsafe { df_iou(&a, &bad, &mut iou) }, DfStatus::Ok);
}

#[test]
fn nms_keeps_best_per_cluster() {
    let b = |x: f64| DfBox {
        x1: x,
        y1: 0.0,
        x2: x + 10.0,
        y2: 10.0,
    };
    let dets = [
        DfDetection {
            bbox: b(0.0),
            score: 0.9,
            class_id: 0,
        },
        DfDetection {
            bbox: b(1.0),
            score: 0.8,
            class_id: 0,
        },
        DfDetection {
            bbox: b(1.0),
            score: 0.7,
            class_id: 1,
        },
        DfDetection {
            bbox: b(50.0),
            score: 0.6,
            class_id: 0,
        },
    ];
    let mut out = [DfDetection::default(); 4];
    let mut n = 0;
    let st = unsafe {
        df_nms(
            dets.as_ptr(),
            dets.len(),
            0.5,
            out.as_mut_ptr(),
            out.len(),
            &mut n,
        )
    };
    assert_eq!(st, DfStatus::Ok);
    assert_eq!(n, 3);
    assert_eq!(
        out[..3].iter().map(|d| d.score).collect::<Vec<_>>(),
        vec![0.9, 0.7, 0.6]
    );

    let mut small = [DfDetection::default(); 1];
    let st = unsafe {
        df_nms(
            dets.as_ptr(),
            dets.len(),
            0.5,
            small.as_mut_ptr(),
            1,
            &mut n,
        )
    };
    assert_eq!(st, DfStatus::ShapeMismatch);
    assert_eq!(n, 3);
}

#[test]
fn anchor_set_lifecycle() {
    let mut set = ptr::null_mut();
    assert_eq!(
        unsafe { df_anchor_set_new(256, 256, &mut set) },
        DfStatus::Ok
    );
    let n = unsafe { df_anchor_set_len(set) };
    // 9 anchors per cell over strides 8..128
    let cells: usize = [8usize, 16, 32, 64, 128]
        .iter()
        .map(|s| (256 / s) * (256 / s))
        .sum();
    assert_eq!(n, 9 * cells);
    let mut b = DfBox::default();
    assert_eq!(unsafe { df_anchor_set_get(set, 0, &mut b) }, DfStatus::Ok);
    assert!(b.x2 > b.x1 && b.y2 > b.y1);
    assert_eq!(
        unsafe { df_anchor_set_get(set, n, &mut b) },
        DfStatus::InvalidArgument
    );
    unsafe { df_anchor_set_free(set) };
    unsafe { df_anchor_set_free(ptr::null_mut()) };
    assert_eq!(unsafe { df_anchor_set_len(ptr::null()) }, 0);
}

#[test]
fn head_forward_and_json_round_trip() {
    let mut head = ptr::null_mut();
    assert_eq!(
        unsafe { df_head_new(3, 2, 4, 0.01, 7, &mut head) },
        DfStatus::Ok
    );
    assert_eq!(unsafe { df_head_input_dim(head) }, 3);
    assert_eq!(unsafe { df_head_num_classes(head) }, 2);

    let feats = [0.5, -1.0, 2.0, 0.0, 0.0, 0.0];
    let mut logits = [0.0; 4];
    let mut boxes = [0.0; 8];
    let st = unsafe {
        df_head_forward(
            head,
            feats.as_ptr(),
            2,
            3,
            logits.as_mut_ptr(),
            4,
            boxes.as_mut_ptr(),
            8,
        )
    };
    assert_eq!(st, DfStatus::Ok);
    let prior = -((1.0 - 0.01f64) / 0.01).ln();
    assert!(logits.iter().all(|l| (l - prior).abs() < 0.5));

    let mut json = ptr::null_mut();
    assert_eq!(unsafe { df_head_to_json(head, &mut json) }, DfStatus::Ok);
    let mut copy = ptr::null_mut();
    assert_eq!(unsafe { df_head_from_json(json, &mut copy) }, DfStatus::Ok);
    let mut logits2 = [0.0; 4];
    let st = unsafe {
        df_head_forward(
            copy,
            feats.as_ptr(),
            2,
            3,
            logits2.as_mut_ptr(),
            4,
            ptr::null_mut(),
            0,
        )
    };
    assert_eq!(st, DfStatus::Ok);
    assert_eq!(logits, logits2);

    let mut wrong = [0.0; 3];
    let st = unsafe {
        df_head_forward(
            head,
            feats.as_ptr(),
            2,
            3,
            wrong.as_mut_ptr(),
            3,
            ptr::null_mut(),
            0,
        )
    };
    assert_eq!(st, DfStatus::ShapeMismatch);

    unsafe {
        df_string_free(json);
        df_head_free(head);
        df_head_free(copy);
    }
}

#[test]
fn malformed_json_is_rejected() {
    let s = CString::new("{\"format\":\"nope\"}").unwrap();
    let mut h = ptr::null_mut();
    assert_ne!(
        unsafe { df_head_from_json(s.as_ptr(), &mut h) },
        DfStatus::Ok
    );
    assert!(h.is_null());
}

#[test]
fn header_declares_every_export() {
    let header = include_str!("../include/densefocus.h");
    for name in [
        "df_version",
        "df_last_error_message",
        "df_sigmoid",
        "df_loss_value",
        "df_loss_grad",
        "df_iou",
        "df_encode",
        "df_decode",
        "df_nms",
        "df_anchor_set_new",
        "df_anchor_set_len",
        "df_anchor_set_get",
        "df_anchor_set_free",
        "df_head_new",
        "df_head_from_json",
        "df_head_to_json",
        "df_head_forward",
        "df_head_free",
        "df_string_free",
    ] {
        assert!(
            header.contains(&format!("{name}(")),
            "{name} missing from header"
        );
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(status) = Command::new("cc").arg("--version").output() else {
        return;
    };
    if !status.status.success() {
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("check.c");
    std::fs::write(
        &src,
        "#include \"densefocus.h\"\nint main(void) { return df_version() == 0; }\n",
    )
    .unwrap();
    let out = Command::new("cc")
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-Werror")
        .arg(format!("-I{}/include", env!("CARGO_MANIFEST_DIR")))
        .arg(&src)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
