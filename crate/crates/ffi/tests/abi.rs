use std::ffi::CStr;
use std::ptr;

use nalgebra::DMatrix;
use pepsi::simlab::dgp::gen_case1;
use pepsi::simlab::rng_stream;
use pepsi::{Family, ModelSpec, PenaltyConfig};
use pepsi_ffi::*;

struct Data {
    y: Vec<f64>,
    x: Vec<f64>,
    s: Vec<f64>,
    n: usize,
    p: usize,
}

fn data(n: usize, seed: u64) -> (Data, pepsi::PrimaryDataset, pepsi::SecondaryDataset) {
    let d = gen_case1(n, 0.8, false, &mut rng_stream(seed, 0)).unwrap();
    let primary = d.primary(1.0);
    let p = d.x.ncols();
    let x = (0..n)
        .flat_map(|i| (0..p).map(move |k| (i, k)))
        .map(|(i, k)| d.x[(i, k)])
        .collect();
    let sec = d.secondaries[0].clone();
    (
        Data {
            y: primary.y().as_slice().to_vec(),
            x,
            s: sec.y().as_slice().to_vec(),
            n,
            p,
        },
        primary,
        sec,
    )
}

fn last_error() -> String {
    let p = pepsi_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

unsafe fn problem(d: &Data, intercept: bool) -> *mut PepsiProblem {
    let mut prob = ptr::null_mut();
    let st = pepsi_problem_new(
        d.y.as_ptr(),
        d.x.as_ptr(),
        d.n,
        d.p,
        PEPSI_FAMILY_LINEAR,
        &mut prob,
    );
    assert_eq!(st, PepsiStatus::Ok);
    let st = pepsi_problem_add_secondary(prob, d.s.as_ptr(), PEPSI_FAMILY_LINEAR, intercept);
    assert_eq!(st, PepsiStatus::Ok);
    prob
}

unsafe fn estimates(fit: *const PepsiFit) -> (Vec<f64>, Vec<f64>) {
    let mut dim = 0;
    assert_eq!(pepsi_fit_dim(fit, &mut dim), PepsiStatus::Ok);
    let mut est = vec![0.0; dim];
    let mut se = vec![0.0; dim];
    let st = pepsi_fit_coefficients(
        fit,
        est.as_mut_ptr(),
        se.as_mut_ptr(),
        ptr::null_mut(),
        ptr::null_mut(),
        ptr::null_mut(),
        dim,
    );
    assert_eq!(st, PepsiStatus::Ok);
    (est, se)
}

#[test]
fn fits_match_the_library() {
    let (d, primary, sec) = data(300, 2);
    let spec = ModelSpec::new(Family::Linear, 4);
    let sspec = ModelSpec::new(Family::Linear, 4);
    let cfg = PenaltyConfig::default();
    unsafe {
        let prob = problem(&d, true);
        for (code, want) in [
            (
                PEPSI_METHOD_NAIVE,
                pepsi::naive_fit(&primary, &spec).unwrap(),
            ),
            (
                PEPSI_METHOD_PSI,
                pepsi::psi_fit(&primary, &sec, &spec, &sspec, &cfg).unwrap(),
            ),
            (
                PEPSI_METHOD_PEPSI,
                pepsi::pepsi_fit(&primary, std::slice::from_ref(&sec), &spec, std::slice::from_ref(&sspec), &cfg).unwrap(),
            ),
        ] {
            let mut fit = ptr::null_mut();
            assert_eq!(pepsi_fit(prob, code, 0.95, &mut fit), PepsiStatus::Ok);
            assert!(pepsi_last_error().is_null());
            let (est, se) = estimates(fit);
            assert_eq!(est, want.beta_hat.as_slice());
            let want_se: Vec<f64> = want
                .covariance
                .diagonal()
                .iter()
                .map(|v| v.sqrt())
                .collect();
            assert_eq!(se, want_se);

            let mut cov = vec![0.0; 25];
            assert_eq!(
                pepsi_fit_covariance(fit, cov.as_mut_ptr(), 25),
                PepsiStatus::Ok
            );
            let cov = DMatrix::from_row_slice(5, 5, &cov);
            assert_eq!(cov, want.covariance);

            let mut w = vec![0.0; d.n];
            assert_eq!(pepsi_fit_weights(fit, w.as_mut_ptr(), d.n), PepsiStatus::Ok);
            assert_eq!(w, want.weights_used.weights.as_slice());
            pepsi_fit_free(fit);
        }
        pepsi_problem_free(prob);
    }
}

#[test]
fn vis_uses_declared_zeros() {
    let (d, _, _) = data(300, 3);
    unsafe {
        let prob = problem(&d, true);
        let mut fit = ptr::null_mut();
        // Without constraints the secondary model is just identified.
        assert_eq!(
            pepsi_fit(prob, PEPSI_METHOD_VIS, 0.95, &mut fit),
            PepsiStatus::InvalidInput
        );
        assert!(fit.is_null());
        assert!(last_error().contains("zero"), "{}", last_error());

        let zeros = [3usize, 4];
        assert_eq!(
            pepsi_problem_set_vis_zeros(prob, zeros.as_ptr(), zeros.len()),
            PepsiStatus::Ok
        );
        assert_eq!(
            pepsi_fit(prob, PEPSI_METHOD_VIS, 0.95, &mut fit),
            PepsiStatus::Ok
        );
        let (_, se_vis) = estimates(fit);
        pepsi_fit_free(fit);
        assert_eq!(
            pepsi_fit(prob, PEPSI_METHOD_NAIVE, 0.95, &mut fit),
            PepsiStatus::Ok
        );
        let (_, se_naive) = estimates(fit);
        pepsi_fit_free(fit);
        assert!(se_vis[3] < se_naive[3]);
        pepsi_problem_free(prob);
    }
}

#[test]
fn intervals_bracket_the_estimate() {
    let (d, _, _) = data(200, 4);
    unsafe {
        let prob = problem(&d, false);
        let mut fit = ptr::null_mut();
        assert_eq!(
            pepsi_fit(prob, PEPSI_METHOD_AVG, 0.9, &mut fit),
            PepsiStatus::Ok
        );
        let mut est = [0.0; 5];
        let mut lo = [0.0; 5];
        let mut hi = [0.0; 5];
        let mut pv = [0.0; 5];
        let st = pepsi_fit_coefficients(
            fit,
            est.as_mut_ptr(),
            ptr::null_mut(),
            lo.as_mut_ptr(),
            hi.as_mut_ptr(),
            pv.as_mut_ptr(),
            5,
        );
        assert_eq!(st, PepsiStatus::Ok);
        for k in 0..5 {
            assert!(lo[k] < est[k] && est[k] < hi[k]);
            assert!((0.0..=1.0).contains(&pv[k]));
        }
        pepsi_fit_free(fit);
        pepsi_problem_free(prob);
    }
}

#[test]
fn el_solve_matches_library() {
    let scores = [1.0, 0.5, -2.0, 0.3, 0.7, -1.0, 0.4, 0.1, -0.2, 0.2];
    let (n, r) = (5, 2);
    let mut lambda = [0.0; 2];
    let mut w = [0.0; 5];
    let mut lr = 0.0;
    let st = unsafe {
        pepsi_el_solve(
            scores.as_ptr(),
            n,
            r,
            lambda.as_mut_ptr(),
            w.as_mut_ptr(),
            &mut lr,
        )
    };
    assert_eq!(st, PepsiStatus::Ok);
    let g = DMatrix::from_row_slice(n, r, &scores);
    let want = pepsi::solve_dual(&g, &pepsi::ElOptions::default()).unwrap();
    assert_eq!(lambda, want.lambda.as_slice());
    assert_eq!(w, want.weights.as_slice());
    assert_eq!(lr, want.log_ratio);
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-10);
}

#[test]
fn el_without_solution_is_numerical() {
    let scores = [1.0, 2.0, 0.5];
    let st = unsafe {
        pepsi_el_solve(
            scores.as_ptr(),
            3,
            1,
            ptr::null_mut(),
            ptr::null_mut(),
            ptr::null_mut(),
        )
    };
    assert_eq!(st, PepsiStatus::Numerical);
    assert!(
        last_error().contains("empirical-likelihood"),
        "{}",
        last_error()
    );
}

#[test]
fn scad_values() {
    let (mut v, mut dv) = (0.0, 0.0);
    assert_eq!(
        unsafe { pepsi_scad(0.5, 1.0, 3.7, &mut v, &mut dv) },
        PepsiStatus::Ok
    );
    assert_eq!((v, dv), (0.5, 1.0));
    assert_eq!(
        unsafe { pepsi_scad(10.0, 1.0, 3.7, &mut v, &mut dv) },
        PepsiStatus::Ok
    );
    assert!((v - 4.7 / 2.0).abs() < 1e-12);
    assert_eq!(dv, 0.0);
    let st = unsafe { pepsi_scad(1.0, 1.0, 1.5, &mut v, ptr::null_mut()) };
    assert_eq!(st, PepsiStatus::InvalidInput);
}

#[test]
fn bad_arguments_are_reported() {
    let (d, _, _) = data(50, 5);
    unsafe {
        let mut prob = ptr::null_mut();
        let st = pepsi_problem_new(
            ptr::null(),
            d.x.as_ptr(),
            d.n,
            d.p,
            PEPSI_FAMILY_LINEAR,
            &mut prob,
        );
        assert_eq!(st, PepsiStatus::NullPointer);
        assert!(prob.is_null());
        assert!(last_error().contains("y"));

        let st = pepsi_problem_new(d.y.as_ptr(), d.x.as_ptr(), d.n, d.p, 7, &mut prob);
        assert_eq!(st, PepsiStatus::InvalidInput);
        assert!(last_error().contains("family"));

        let st = pepsi_problem_new(
            d.y.as_ptr(),
            d.x.as_ptr(),
            d.n,
            d.p,
            PEPSI_FAMILY_LOGISTIC,
            &mut prob,
        );
        assert_eq!(st, PepsiStatus::InvalidInput);

        let mut bad = d.y.clone();
        bad[3] = f64::NAN;
        let st = pepsi_problem_new(
            bad.as_ptr(),
            d.x.as_ptr(),
            d.n,
            d.p,
            PEPSI_FAMILY_LINEAR,
            &mut prob,
        );
        assert_eq!(st, PepsiStatus::InvalidInput);

        let prob = problem(&d, true);
        let mut fit = ptr::null_mut();
        assert_eq!(
            pepsi_fit(prob, 99, 0.95, &mut fit),
            PepsiStatus::InvalidInput
        );
        assert_eq!(
            pepsi_fit(ptr::null(), PEPSI_METHOD_NAIVE, 0.95, &mut fit),
            PepsiStatus::NullPointer
        );
        assert_eq!(
            pepsi_fit(prob, PEPSI_METHOD_NAIVE, 1.5, &mut fit),
            PepsiStatus::InvalidInput
        );
        assert_eq!(
            pepsi_fit(prob, PEPSI_METHOD_NAIVE, 0.95, &mut fit),
            PepsiStatus::Ok
        );
        let mut small = [0.0; 3];
        let st = pepsi_fit_coefficients(
            fit,
            small.as_mut_ptr(),
            ptr::null_mut(),
            ptr::null_mut(),
            ptr::null_mut(),
            ptr::null_mut(),
            3,
        );
        assert_eq!(st, PepsiStatus::InvalidInput);
        assert!(last_error().contains("5 needed"), "{}", last_error());
        let bad_grid = [-1.0];
        assert_eq!(
            pepsi_problem_set_tau_grid(prob, bad_grid.as_ptr(), 1),
            PepsiStatus::InvalidInput
        );
        pepsi_fit_free(fit);
        pepsi_problem_free(prob);
        pepsi_problem_free(ptr::null_mut());
        pepsi_fit_free(ptr::null_mut());
    }
}

#[test]
fn errors_are_per_thread() {
    let st = unsafe { pepsi_scad(1.0, -1.0, 3.7, ptr::null_mut(), ptr::null_mut()) };
    assert_eq!(st, PepsiStatus::InvalidInput);
    std::thread::spawn(|| assert!(pepsi_last_error().is_null()))
        .join()
        .unwrap();
    assert!(!pepsi_last_error().is_null());
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(pepsi_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
