use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use fedp3_core::objective::QuadraticProblem;
use fedp3_core::rng::{seeded, SimRng};
use fedp3_core::sketch::{apply_perm_sketch, perm_sketches_from, sample_perm_sketches};
use fedp3_core::theory::{
    certify_convergence, comm_comparison, convergence_bound, convergence_max_gamma, exp_control_holds, ist_step,
    pruning_certificate, recursion_growth, recursion_weights, run_dgd, run_ist, run_pruned_ist_and_certify, CertMode,
    IstConfig, MaskDistribution,
};
use fedp3_core::Error;
use proptest::prelude::*;

fn gauss(d: usize, rng: &mut SimRng) -> DVector<f64> {
    DVector::from_fn(d, |_, _| StandardNormal.sample(rng))
}

fn all_perms(d: usize) -> Vec<Vec<usize>> {
    if d == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in all_perms(d - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, d - 1);
            out.push(q);
        }
    }
    out
}

fn no_sketch(gamma: f64, iterations: usize) -> IstConfig {
    IstConfig {
        gamma,
        iterations,
        keep_ratio: None,
        sketches: false,
    }
}

#[test]
fn single_client_is_closed_form_gradient_descent() {
    let lambdas = [0.5, 1.0, 2.0];
    let b = DVector::from_vec(vec![1.0, -2.0, 0.5]);
    let p = QuadraticProblem::new(
        vec![DMatrix::from_diagonal(&DVector::from_row_slice(&lambdas))],
        vec![b.clone()],
    )
    .unwrap();
    let w0 = DVector::from_vec(vec![3.0, 0.0, -1.0]);
    let gamma = 0.3;
    let traj = run_ist(&p, &no_sketch(gamma, 25), &w0, &mut seeded(0)).unwrap();
    for (k, pt) in traj.points.iter().enumerate() {
        for j in 0..3 {
            let star = b[j] / lambdas[j];
            let expect = star + (1.0 - gamma * lambdas[j]).powi(k as i32) * (w0[j] - star);
            assert!((pt.w[j] - expect).abs() < 1e-12);
        }
    }
    let dgd = run_dgd(&p, gamma, 25, &w0).unwrap();
    assert_eq!(dgd.trajectory.points, traj.points);
    assert_eq!(dgd.upload_scalars, 3 * 25);
    assert_eq!(dgd.download_scalars, 3 * 25);
}

#[test]
fn zero_step_sketched_mean_is_identity() {
    let mut rng = seeded(1);
    let p = QuadraticProblem::random(2, 4, 0.1, true, &mut rng).unwrap();
    let w = gauss(4, &mut rng);
    let mut mean = DVector::zeros(4);
    let perms = all_perms(4);
    for perm in &perms {
        let sk = perm_sketches_from(perm.clone(), 2).unwrap();
        mean += ist_step(&p, &w, 0.0, None, Some(&sk)).unwrap();
    }
    mean /= perms.len() as f64;
    assert!((mean - w).amax() < 1e-12);
}

#[test]
fn sketched_step_matches_update_equation() {
    let mut rng = seeded(2);
    let p = QuadraticProblem::random(3, 6, 0.1, true, &mut rng).unwrap();
    let w = gauss(6, &mut rng);
    let gamma = 0.2;
    for _ in 0..20 {
        let sk = sample_perm_sketches(6, 3, &mut rng).unwrap();
        let ours = ist_step(&p, &w, gamma, None, Some(&sk)).unwrap();
        let mut expect = DVector::zeros(6);
        for (i, s) in sk.iter().enumerate() {
            let u = &w - p.local_grad(i, &w).unwrap() * gamma;
            expect += DVector::from_vec(apply_perm_sketch(s, u.as_slice()).unwrap()) / 3.0;
        }
        assert!((ours - expect).amax() < 1e-12);
    }
}

#[test]
fn dgd_converges_linearly_on_strongly_convex() {
    let mut rng = seeded(3);
    let p = QuadraticProblem::random(3, 5, 0.5, true, &mut rng).unwrap();
    let lbar_mat = p.mean_hessian();
    let gamma = 1.0 / SymmetricEigen::new(lbar_mat).eigenvalues.max();
    let run = run_dgd(&p, gamma, 50, &gauss(5, &mut rng)).unwrap();
    let finf = p.f_inf().unwrap();
    for w in run.trajectory.points.windows(2) {
        let (a, b) = (w[0].value - finf, w[1].value - finf);
        if a > 1e-14 {
            assert!(b / a < 1.0);
        }
    }
}

#[test]
fn random_instance_respects_bound() {
    let mut rng = seeded(4);
    let p = QuadraticProblem::random(4, 8, 0.1, true, &mut rng).unwrap();
    let s = p.smoothness();
    let k = 30;
    let gamma = convergence_max_gamma(s.l_bar, s.l_max, k);
    let cert = certify_convergence(&p, gamma, k, &gauss(8, &mut rng), 100, 5).unwrap();
    assert!(cert.satisfied, "{} > {}", cert.lhs, cert.rhs);
    assert_eq!(cert.constants["K"], 30.0);
}

#[test]
fn bound_rejects_large_steps() {
    let max = convergence_max_gamma(2.0, 4.0, 50);
    assert!((max - 1.0 / (400.0f64).sqrt()).abs() < 1e-15);
    let b = convergence_bound(1.5, 2.0, 4.0, max, 50).unwrap();
    assert!(b.rhs <= b.simplified);
    match convergence_bound(1.5, 2.0, 4.0, max * 1.01, 50) {
        Err(Error::InvalidArgument(msg)) => assert!(msg.contains(&max.to_string())),
        other => panic!("{other:?}"),
    }
}

#[test]
fn comm_counts_are_exact_integers() {
    let r = comm_comparison(1.0, 1.0, 2.0, 4, 8, 0.1).unwrap();
    assert_eq!(r.k_fedp3, 1800);
    assert_eq!(r.k_dgd, 20);
    assert_eq!((r.per_round_fedp3, r.per_round_dgd), (8, 32));
    assert_eq!((r.c_fedp3, r.c_dgd), (14_400, 640));
    let single = comm_comparison(1.0, 1.0, 1.0, 1, 8, 0.1).unwrap();
    assert_eq!(single.per_round_fedp3, single.per_round_dgd);
    assert!(comm_comparison(1.0, 1.0, 1.0, 3, 8, 0.1).is_err());
    assert!(comm_comparison(1.0, 1.0, 1.0, 2, 8, 0.0).is_err());
}

#[test]
fn weighted_recursion_bound() {
    let mut rng = seeded(6);
    for _ in 0..1000 {
        let a = 1.0 + rng.random::<f64>() * 0.2;
        let k = rng.random_range(1..60);
        let c = rng.random::<f64>();
        let mut x = rng.random::<f64>() * 10.0;
        let x0 = x;
        let mut ys = Vec::with_capacity(k);
        for _ in 0..k {
            let room = a * x + c;
            let y = rng.random::<f64>() * room;
            let slack = rng.random::<f64>() * (room - y);
            ys.push(y);
            x = a * x - y + c - slack;
        }
        let p = recursion_weights(a, k).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let weighted: f64 = p.iter().zip(&ys).map(|(pk, y)| pk * y).sum();
        let bound = recursion_growth(a, k) * x0 + c;
        assert!(weighted <= bound * (1.0 + 1e-12), "{weighted} > {bound}");
    }
    assert!(recursion_weights(0.9, 3).is_err());
}

proptest! {
    #[test]
    fn exp_control(a in 1.0f64..1.5, k in 1usize..200) {
        prop_assert!(exp_control_holds(a, k));
    }
}

fn single(l: DMatrix<f64>) -> QuadraticProblem {
    QuadraticProblem::homogeneous(vec![l]).unwrap()
}

#[test]
fn unpruned_analysis_is_closed_form() {
    let l = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 2.0, 1.0]));
    let a = pruning_certificate(
        &single(l.clone()),
        MaskDistribution {
            keep_ratio: 1.0,
            shared: false,
        },
        CertMode::Exhaustive,
    )
    .unwrap();
    assert!((&a.w - &l * &l).amax() < 1e-12);
    assert!((&a.e_blb - &l * &l * &l).amax() < 1e-12);
    assert!((a.theta.unwrap() - 2.0).abs() < 1e-10);
    assert_eq!(a.growth_excess, 0.0);
}

#[test]
fn two_coordinate_brute_force() {
    let l = DMatrix::from_diagonal(&DVector::from_vec(vec![1.5, 0.7]));
    let q = 0.6;
    let mut w = DMatrix::zeros(2, 2);
    let mut e = DMatrix::zeros(2, 2);
    for (m0, m1) in [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)] {
        let prob = [1.0 - q, q][m0 as usize] * [1.0 - q, q][m1 as usize];
        let pm = DMatrix::from_diagonal(&DVector::from_vec(vec![m0, m1]));
        let b = &pm * &l * &pm;
        w += (&pm * &l * &b + &pm * &b * &l) * (0.5 * prob);
        e += &b * &l * &b * prob;
    }
    let a = pruning_certificate(
        &single(l),
        MaskDistribution {
            keep_ratio: q,
            shared: false,
        },
        CertMode::Exhaustive,
    )
    .unwrap();
    assert!((&a.w - w).amax() < 1e-14);
    assert!((&a.e_blb - e).amax() < 1e-14);
    assert_eq!(a.atoms, 4);
}

#[test]
fn identical_clients_with_shared_masks_reduce_to_one() {
    let mut rng = seeded(7);
    let base = QuadraticProblem::random(1, 4, 0.3, false, &mut rng).unwrap();
    let l = base.hessian(0).unwrap().clone();
    let dist = MaskDistribution {
        keep_ratio: 0.7,
        shared: true,
    };
    let one = pruning_certificate(&base, dist, CertMode::Exhaustive).unwrap();
    let three = pruning_certificate(
        &QuadraticProblem::homogeneous(vec![l; 3]).unwrap(),
        dist,
        CertMode::Exhaustive,
    )
    .unwrap();
    assert!((&one.w - &three.w).amax() < 1e-12);
    assert!((&one.e_blb - &three.e_blb).amax() < 1e-12);
    assert!((one.theta.unwrap() - three.theta.unwrap()).abs() < 1e-9);
}

#[test]
fn monte_carlo_approaches_exhaustive() {
    let l = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 3.0]));
    let p = QuadraticProblem::homogeneous(vec![l.clone(), l * 0.5]).unwrap();
    let dist = MaskDistribution {
        keep_ratio: 0.5,
        shared: false,
    };
    let exact = pruning_certificate(&p, dist, CertMode::Exhaustive).unwrap();
    let mc = pruning_certificate(
        &p,
        dist,
        CertMode::MonteCarlo {
            samples: 40_000,
            seed: 1,
        },
    )
    .unwrap();
    assert!(!mc.exhaustive);
    assert!((&exact.w - &mc.w).amax() < 0.05 * exact.w.amax());
    let auto = pruning_certificate(&p, dist, CertMode::Auto { samples: 10, seed: 1 }).unwrap();
    assert!(auto.exhaustive);
    assert!(pruning_certificate(
        &QuadraticProblem::homogeneous(vec![DMatrix::identity(9, 9); 2]).unwrap(),
        dist,
        CertMode::Exhaustive
    )
    .is_err());
}

#[test]
fn pruned_runs_and_step_gate() {
    let l = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.5, 0.8, 1.2]));
    let p = QuadraticProblem::homogeneous(vec![l.clone(), l * 1.3]).unwrap();
    let w0 = DVector::from_vec(vec![1.0, -0.5, 0.3, 2.0]);

    let full = pruning_certificate(
        &p,
        MaskDistribution {
            keep_ratio: 1.0,
            shared: false,
        },
        CertMode::Exhaustive,
    )
    .unwrap();
    let cert = run_pruned_ist_and_certify(&p, &full, 20, &w0, 4, 0, None).unwrap();
    assert!(cert.bound.satisfied && cert.bound.lhs < cert.bound.rhs);
    assert_eq!(cert.fraction_within, 1.0);

    let pruned = pruning_certificate(
        &p,
        MaskDistribution {
            keep_ratio: 0.75,
            shared: false,
        },
        CertMode::Exhaustive,
    )
    .unwrap();
    assert!(pruned.certified());
    let theta = pruned.theta.unwrap();
    let too_big = run_pruned_ist_and_certify(&p, &pruned, 20, &w0, 4, 0, Some(1.01 / theta));
    assert!(matches!(too_big, Err(Error::Precondition(_))));
    let smaller = run_pruned_ist_and_certify(&p, &pruned, 20, &w0, 50, 0, Some(0.5 / theta)).unwrap();
    assert!(smaller.bound.satisfied);

    let inhomogeneous =
        QuadraticProblem::new(vec![DMatrix::identity(2, 2)], vec![DVector::from_vec(vec![1.0, 0.0])]).unwrap();
    assert!(matches!(
        pruning_certificate(
            &inhomogeneous,
            MaskDistribution {
                keep_ratio: 0.5,
                shared: false
            },
            CertMode::Exhaustive
        ),
        Err(Error::Precondition(_))
    ));
}

#[test]
fn sketched_upload_count() {
    let mut rng = seeded(8);
    let p = QuadraticProblem::random(4, 8, 0.1, true, &mut rng).unwrap();
    let cfg = IstConfig {
        gamma: 0.05,
        iterations: 7,
        keep_ratio: Some(0.9),
        sketches: true,
    };
    let t = run_ist(&p, &cfg, &gauss(8, &mut rng), &mut rng).unwrap();
    assert_eq!(t.upload_scalars, 8 * 7);
    assert_eq!(t.points.len(), 8);
    assert_eq!(t.grad_norms().len(), 7);
    let bad = QuadraticProblem::random(3, 8, 0.1, true, &mut rng).unwrap();
    assert!(run_ist(&bad, &cfg, &gauss(8, &mut rng), &mut rng).is_err());
}
