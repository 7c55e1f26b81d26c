use std::ffi::CStr;
use std::ptr;

use heed_ffi::*;

fn last_error() -> String {
    let p = heed_last_error_message();
    assert!(!p.is_null(), "expected an error message");
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn features(h: usize, w: usize, d: usize) -> Vec<f64> {
    (0..h * w * d)
        .map(|i| ((i * 7919) % 23) as f64 / 23.0 - 0.4)
        .collect()
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(heed_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn density_matches_the_library() {
    let (h, w, d) = (4, 5, 3);
    let f = features(h, w, d);
    let mut rho = vec![0.0; h * w];
    let mut tilde = vec![0.0; h * w];
    let st =
        unsafe { heed_patch_density(f.as_ptr(), h, w, d, rho.as_mut_ptr(), tilde.as_mut_ptr()) };
    assert_eq!(st, HeedStatus::Ok);

    let grid = heed::density::PatchGrid::new(h, w, d, f).unwrap();
    let map = heed::density::normalize_density(heed::density::patch_density(&grid).unwrap());
    assert_eq!(rho, map.rho);
    assert_eq!(tilde, map.rho_tilde);
    assert!(heed_last_error_message().is_null());
}

#[test]
fn density_without_tilde_output() {
    let f = features(3, 3, 2);
    let mut rho = vec![0.0; 9];
    let st = unsafe { heed_patch_density(f.as_ptr(), 3, 3, 2, rho.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(st, HeedStatus::Ok);
    assert!(rho.iter().all(|r| r.is_finite()));
}

#[test]
fn density_rejects_null_and_bad_shapes() {
    let mut rho = vec![0.0; 4];
    let st = unsafe { heed_patch_density(ptr::null(), 2, 2, 1, rho.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(st, HeedStatus::NullPointer);
    assert!(last_error().contains("features"));

    let f = vec![1.0; 0];
    let st = unsafe { heed_patch_density(f.as_ptr(), 0, 2, 1, rho.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(st, HeedStatus::Density);

    let st = unsafe {
        heed_patch_density(
            f.as_ptr(),
            usize::MAX,
            2,
            2,
            rho.as_mut_ptr(),
            ptr::null_mut(),
        )
    };
    assert_eq!(st, HeedStatus::InvalidArgument);
}

#[test]
fn weights_sum_to_sequence_length() {
    let rho = [0.1, 0.5, 0.9, 0.3];
    let mut w = vec![0.0; 7];
    let st = unsafe { heed_sequence_weights(rho.as_ptr(), 4, 3, 0.5, 1.0, w.as_mut_ptr()) };
    assert_eq!(st, HeedStatus::Ok);
    assert!((w.iter().sum::<f64>() - 7.0).abs() < 1e-12);
    assert!(w[2] > w[1] && w[1] > w[3] && w[3] > w[0]);

    let st = unsafe { heed_sequence_weights(rho.as_ptr(), 4, 3, 0.0, 1.0, w.as_mut_ptr()) };
    assert_eq!(st, HeedStatus::Density);
}

#[test]
fn residual_loss_value_and_gradient() {
    let (l, t, d) = (2, 3, 2);
    let s: Vec<f64> = (0..l * t * d).map(|i| i as f64 * 0.1).collect();
    let te: Vec<f64> = (0..l * t * d).map(|i| (i % 5) as f64 * 0.2).collect();
    let w = [0.5, 1.0, 1.5];
    let mut v = 0.0;
    let mut g = vec![0.0; l * t * d];
    let st = unsafe {
        heed_residual_loss(
            s.as_ptr(),
            te.as_ptr(),
            l,
            t,
            d,
            w.as_ptr(),
            &mut v,
            g.as_mut_ptr(),
        )
    };
    assert_eq!(st, HeedStatus::Ok);

    // direct sum over the flat layout
    let mut want = 0.0;
    for (i, (a, b)) in s.iter().zip(&te).enumerate() {
        let p = (i / d) % t;
        want += w[p] * (a - b) * (a - b);
        assert!((g[i] - 2.0 * w[p] * (a - b) / (l * t) as f64).abs() < 1e-12);
    }
    want /= (l * t) as f64;
    assert!((v - want).abs() < 1e-12);

    // null weights: plain mean
    let st = unsafe {
        heed_residual_loss(
            s.as_ptr(),
            te.as_ptr(),
            l,
            t,
            d,
            ptr::null(),
            &mut v,
            ptr::null_mut(),
        )
    };
    assert_eq!(st, HeedStatus::Ok);
    let plain: f64 = s
        .iter()
        .zip(&te)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / (l * t) as f64;
    assert!((v - plain).abs() < 1e-12);

    let neg = [1.0, -1.0, 1.0];
    let st = unsafe {
        heed_residual_loss(
            s.as_ptr(),
            te.as_ptr(),
            l,
            t,
            d,
            neg.as_ptr(),
            &mut v,
            ptr::null_mut(),
        )
    };
    assert_eq!(st, HeedStatus::Loss);
    assert!(last_error().contains("position 1"));
}

#[test]
fn kd_loss_ignores_negative_labels() {
    let s = [0.2, -0.1, 0.4, 1.0, 0.0, -0.5];
    let t = [0.0, 0.3, 0.1, 0.2, 0.2, 0.2];
    let mut v_all = 0.0;
    let mut v_one = 0.0;
    let mut g = [0.0; 6];
    unsafe {
        assert_eq!(
            heed_kd_loss(
                s.as_ptr(),
                t.as_ptr(),
                2,
                3,
                [2i64, 0].as_ptr(),
                1.0,
                0.1,
                &mut v_all,
                ptr::null_mut()
            ),
            HeedStatus::Ok
        );
        assert_eq!(
            heed_kd_loss(
                s.as_ptr(),
                t.as_ptr(),
                2,
                3,
                [2i64, -1].as_ptr(),
                1.0,
                0.1,
                &mut v_one,
                g.as_mut_ptr()
            ),
            HeedStatus::Ok
        );
    }
    assert_ne!(v_all, v_one);
    assert!(g[3..].iter().all(|&x| x == 0.0));
    // softmax gradients sum to zero per row
    assert!(g[..3].iter().sum::<f64>().abs() < 1e-12);

    let st = unsafe {
        heed_kd_loss(
            s.as_ptr(),
            t.as_ptr(),
            2,
            3,
            [-1i64, -1].as_ptr(),
            1.0,
            0.1,
            &mut v_one,
            ptr::null_mut(),
        )
    };
    assert_eq!(st, HeedStatus::Loss);
    let st = unsafe {
        heed_kd_loss(
            s.as_ptr(),
            t.as_ptr(),
            2,
            3,
            [7i64, 0].as_ptr(),
            1.0,
            0.1,
            &mut v_one,
            ptr::null_mut(),
        )
    };
    assert_eq!(st, HeedStatus::Loss);
}

#[test]
fn cache_round_trip() {
    unsafe {
        let c = heed_cache_new();
        let a = [0.0, 0.5, 1.0];
        let b = [0.25; 5];
        assert_eq!(heed_cache_push(c, 9, a.as_ptr(), 3), HeedStatus::Ok);
        assert_eq!(heed_cache_push(c, 4, b.as_ptr(), 5), HeedStatus::Ok);
        assert_eq!(heed_cache_push(c, 9, a.as_ptr(), 3), HeedStatus::Cache);
        assert_eq!(heed_cache_push(c, 5, [1.5].as_ptr(), 1), HeedStatus::Cache);

        let mut need = 0;
        assert_eq!(
            heed_cache_encode(c, ptr::null_mut(), 0, &mut need),
            HeedStatus::BufferTooSmall
        );
        let mut buf = vec![0u8; need];
        let mut written = 0;
        assert_eq!(
            heed_cache_encode(c, buf.as_mut_ptr(), buf.len(), &mut written),
            HeedStatus::Ok
        );
        assert_eq!(written, need);
        heed_cache_free(c);

        let mut d = ptr::null_mut();
        assert_eq!(
            heed_cache_decode(buf.as_ptr(), buf.len(), &mut d),
            HeedStatus::Ok
        );
        let mut len = 0;
        assert_eq!(heed_cache_len(d, &mut len), HeedStatus::Ok);
        assert_eq!(len, 2);
        let (mut id, mut n) = (0u64, 0usize);
        assert_eq!(heed_cache_entry(d, 0, &mut id, &mut n), HeedStatus::Ok);
        assert_eq!((id, n), (9, 3));
        assert_eq!(
            heed_cache_entry(d, 2, &mut id, &mut n),
            HeedStatus::NotFound
        );

        let mut out = [0.0; 3];
        assert_eq!(
            heed_cache_get(d, 9, out.as_mut_ptr(), 3, &mut n),
            HeedStatus::Ok
        );
        for (x, y) in out.iter().zip(a) {
            assert!((x - y).abs() <= 1.0 / 30.0);
        }
        assert_eq!(
            heed_cache_get(d, 4, out.as_mut_ptr(), 3, &mut n),
            HeedStatus::BufferTooSmall
        );
        assert_eq!(n, 5);
        assert_eq!(
            heed_cache_get(d, 77, out.as_mut_ptr(), 3, &mut n),
            HeedStatus::NotFound
        );
        heed_cache_free(d);
        heed_cache_free(ptr::null_mut());
    }
}

#[test]
fn cache_decode_maps_format_errors() {
    let mut d = ptr::null_mut();
    unsafe {
        assert_eq!(
            heed_cache_decode(b"NOTACACHE_______".as_ptr(), 16, &mut d),
            HeedStatus::BadMagic
        );
        assert_eq!(
            heed_cache_decode(b"HEED".as_ptr(), 4, &mut d),
            HeedStatus::Truncated
        );
        assert_eq!(
            heed_cache_decode(ptr::null(), 0, &mut d),
            HeedStatus::NullPointer
        );
    }
    assert!(d.is_null());
}

#[test]
fn errors_are_per_thread() {
    let st = unsafe { heed_sequence_weights(ptr::null(), 1, 0, 1.0, 1.0, ptr::null_mut()) };
    assert_eq!(st, HeedStatus::NullPointer);
    std::thread::spawn(|| assert!(heed_last_error_message().is_null()))
        .join()
        .unwrap();
    assert!(!heed_last_error_message().is_null());
}
