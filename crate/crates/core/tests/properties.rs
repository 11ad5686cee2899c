//! Property tests for invariants that hold for every input.

mod common;

use proptest::prelude::*;
use relu_dynamics::certificates as cert;
use relu_dynamics::cli::SweepSpec;
use relu_dynamics::models::{InitSpec, Network, Variant};
use relu_dynamics::partition::{self, Cell};
use relu_dynamics::prm;
use relu_dynamics::rng::Rng;
use relu_dynamics::training::{BatchSampler, HittingTime, LrSchedule};
use relu_dynamics::{datasets, models};

fn cell_strategy() -> impl Strategy<Value = Cell> {
    prop_oneof![Just(Cell::TL), Just(Cell::TD), Just(Cell::FL), Just(Cell::FD)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rng_streams_are_reproducible(seed in any::<u64>(), stream in 0u64..8) {
        let mut a = Rng::stream(seed, stream);
        let mut b = Rng::stream(seed, stream);
        for _ in 0..32 {
            prop_assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
        let mut c = Rng::stream(seed, stream + 1);
        let mut a = Rng::stream(seed, stream);
        let xs: Vec<u64> = (0..4).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..4).map(|_| c.next_u64()).collect();
        prop_assert_ne!(xs, ys);
    }

    #[test]
    fn unit_sphere_has_unit_norm(seed in any::<u64>(), d in 1usize..64) {
        let v = Rng::new(seed).unit_sphere(d);
        prop_assert!((common::norm(&v) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_stays_in_range(seed in any::<u64>()) {
        let mut r = Rng::new(seed);
        for _ in 0..100 {
            let u = r.uniform();
            prop_assert!((0.0..1.0).contains(&u));
            let o = r.uniform_open();
            prop_assert!(o > 0.0 && o <= 1.0);
        }
    }

    #[test]
    fn cells_pack_roundtrip(cells in prop::collection::vec(cell_strategy(), 0..300)) {
        let packed = partition::pack_cells(&cells);
        prop_assert_eq!(packed.len(), cells.len().div_ceil(4));
        prop_assert_eq!(partition::unpack_cells(&packed, cells.len()), cells);
    }

    #[test]
    fn partition_counts_sum_to_width(seed in any::<u64>(), m in 1usize..40, multi in any::<bool>()) {
        let variant = if multi { Variant::MultiBias } else { Variant::BinaryNoBias };
        let mut rng = Rng::new(seed);
        let ds = common::random_dataset(variant, 6, 4, 3, &mut rng);
        let net = common::random_net(variant, m, 4, 3, &mut rng);
        let snap = partition::compute_partition(&net, &ds, 0).unwrap();
        for i in 0..ds.n() {
            prop_assert_eq!(snap.counts(i).iter().sum::<usize>(), m);
        }
    }

    #[test]
    fn hitting_time_from_first_violation(first in prop::option::of(0usize..100), extra in 0usize..100) {
        let last = first.unwrap_or(0) + extra;
        let h = HittingTime::from_first_violation(first, last);
        match first {
            Some(s) if s >= 2 => {
                prop_assert_eq!(h, HittingTime::Hit { t: s - 2 });
                prop_assert!(h.at_least(s - 2) && !h.at_least(s - 1));
            }
            Some(_) => prop_assert_eq!(h, HittingTime::Empty),
            None if last >= 1 => prop_assert!(h.at_least(last - 1)),
            None => prop_assert_eq!(h, HittingTime::Empty),
        }
    }

    #[test]
    fn schedules_follow_their_formulas(eta0 in 1e-4f64..1.0, c in 1e-3f64..1.0, t in 0usize..10_000, loss in 1e-8f64..10.0) {
        prop_assert_eq!(LrSchedule::Constant { eta: eta0 }.eta_at(t, loss), eta0);
        let inv = LrSchedule::LossInverse { eta0, c }.eta_at(t, loss);
        prop_assert_eq!(inv, if t == 0 { eta0 } else { c / loss });
        let poly = LrSchedule::TwoStagePoly { eta0, c, t0: Some(5_000), c_prime: 0.1, r: 1.0, force_stage2_at: None };
        let want = match t {
            0 => eta0,
            t if t < 5_000 => c / (t as f64 * loss),
            _ => 0.1 / loss.sqrt(),
        };
        prop_assert!((poly.eta_at(t, loss) - want).abs() <= 1e-12 * want);
    }

    #[test]
    fn batch_indices_in_range(n in 1usize..50, batch in 1usize..80, seed in any::<u64>(), replacement in any::<bool>()) {
        let res = BatchSampler::new(n, batch, seed, replacement);
        if !replacement && batch > n {
            prop_assert!(res.is_err());
        } else {
            let mut s = res.unwrap();
            let idx = s.sample();
            prop_assert_eq!(idx.len(), batch);
            prop_assert!(idx.iter().all(|&i| i < n));
            if !replacement {
                let mut sorted = idx.clone();
                sorted.sort_unstable();
                sorted.dedup();
                prop_assert_eq!(sorted.len(), batch);
            }
        }
    }

    #[test]
    fn a9_closed_form_matches_summation(eta in 1e-3f64..0.05, t in 2u64..300) {
        let c = cert::lemma_a9_sum(eta, t);
        let o = common::a9_oracle(eta, t);
        prop_assert!((c - o).abs() <= 1e-11 * o.abs().max(1.0), "{} vs {}", c, o);
    }

    #[test]
    fn kernel_is_positively_homogeneous(seed in any::<u64>(), s in 0.01f64..10.0, r in 0.01f64..10.0) {
        let mut rng = Rng::new(seed);
        let w: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let v: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let ws: Vec<f64> = w.iter().map(|x| s * x).collect();
        let vr: Vec<f64> = v.iter().map(|x| r * x).collect();
        let k = prm::arccos_kernel(&w, &v).unwrap();
        let k2 = prm::arccos_kernel(&ws, &vr).unwrap();
        prop_assert!((k2 - s * r * k).abs() <= 1e-12 * (s * r * k).abs().max(1e-300));
        prop_assert!(k >= 0.0);
    }

    #[test]
    fn kappa_is_the_minimum(eta in 1e-4f64..1.0, n in 1usize..1000, mu0 in 0.01f64..1.0) {
        let k = cert::kappa_theorem1(eta, n, mu0);
        let nf = n as f64;
        let terms = [1e-3, eta / 2000.0, eta / (3.0 * nf), eta * mu0 / (3.0 * nf)];
        prop_assert!(terms.iter().all(|&x| k <= x));
        prop_assert!(terms.contains(&k));
    }

    #[test]
    fn report_slack_sign_matches_pass(bound in -10.0f64..10.0, measured in -10.0f64..10.0) {
        let lo = cert::CertificateReport::at_least("x", bound, measured, "");
        prop_assert_eq!(lo.pass, measured >= bound);
        prop_assert_eq!(lo.pass, lo.slack >= 0.0);
        let hi = cert::CertificateReport::at_most("x", bound, measured, "");
        prop_assert_eq!(hi.pass, measured <= bound);
        let inc = lo.clone().with_budget(true);
        prop_assert_eq!(inc.verdict == cert::Verdict::Inconclusive, !lo.pass);
    }

    #[test]
    fn init_is_deterministic(seed in any::<u64>(), m in 1usize..30, d in 1usize..10) {
        let spec = InitSpec { kappa: 0.1, seed, variant: Variant::BinaryNoBias };
        let a = models::init_binary(m, d, &spec).unwrap();
        let b = models::init_binary(m, d, &spec).unwrap();
        prop_assert_eq!(&a, &b);
        let sq = 1.0 / (m as f64).sqrt();
        prop_assert!(a.a.iter().all(|&v| (v.abs() - sq).abs() < 1e-15));
        let net = Network::Binary(a);
        prop_assert_eq!(net.with_params(&net.params()).unwrap(), net);
    }

    #[test]
    fn orthant_data_is_separable(seed in any::<u64>(), half in 1usize..15, d in 2usize..12) {
        let ds = datasets::gen_orthant_separable(2 * half, d, seed, true).unwrap();
        prop_assert!(ds.x.row_iter().all(|r| (r.norm() - 1.0).abs() < 1e-12));
        let rep = datasets::validate_separable(&ds).unwrap();
        prop_assert!(rep.satisfies_4_1_i);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn sweep_expands_the_cross_product(ms in prop::collection::vec(1usize..500, 1..4), etas in prop::collection::vec(1e-4f64..0.1, 1..4)) {
        let spec: SweepSpec = serde_json::from_value(serde_json::json!({
            "base": {
                "kind": "early-binary",
                "dataset": {"type": "synthetic_orthant", "n": 4, "d": 3},
                "model": {"m": 1, "kappa": "auto"},
                "loss": "quadratic",
                "schedule": {"kind": "constant", "eta": 0.01},
                "train": {"steps": 2}
            },
            "axes": [
                {"param": "model.m", "values": ms},
                {"param": "schedule.eta", "values": etas}
            ]
        })).unwrap();
        let pts = spec.expand().unwrap();
        prop_assert_eq!(pts.len(), ms.len() * etas.len());
        prop_assert_eq!(spec.size(), pts.len());
        for (q, (axes, cfg)) in pts.iter().enumerate() {
            let (i, j) = (q / etas.len(), q % etas.len());
            prop_assert_eq!(cfg.model.as_ref().unwrap().m, ms[i]);
            prop_assert_eq!(axes[0].as_u64().unwrap() as usize, ms[i]);
            match cfg.schedule.as_ref().unwrap() {
                relu_dynamics::cli::config::ScheduleSpec::Constant { eta } => prop_assert_eq!(*eta, etas[j]),
                other => prop_assert!(false, "unexpected schedule {:?}", other),
            }
        }
    }

    #[test]
    fn csv_export_roundtrips(seed in any::<u64>(), half in 1usize..8, d in 2usize..6) {
        let ds = datasets::gen_orthant_separable(2 * half, d, seed, false).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let rep = datasets::validate_separable(&ds).unwrap();
        datasets::export(&ds, dir.path(), "ds", &rep, None).unwrap();
        let back = datasets::read_csv(dir.path().join("ds.csv"), None).unwrap();
        prop_assert_eq!(&back.labels, &ds.labels);
        prop_assert_eq!(back.x, ds.x);
    }
}
