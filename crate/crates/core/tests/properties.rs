use opf_learn::case_model::load_builtin;
use opf_learn::nn::decode_outputs;
use opf_learn::recovery::clamp_q;
use opf_learn::sampling::{gibbs_sample_loads, read_dataset, write_dataset, TrainingSample};
use opf_learn::{LoadScenario, Network, PfOptions, PfSpec, PowerFlow, SamplerConfig, SetpointVector};
use proptest::prelude::*;

fn case14() -> Network {
    load_builtin("case14").unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decoded_setpoints_stay_inside_limits(
        raw in prop::collection::vec(prop_oneof![-1e9..1e9f64, 0.0..1.0f64, Just(f64::MAX), Just(f64::MIN)], 9)
    ) {
        let net = case14();
        let d = decode_outputs(&SetpointVector::from_slice(&raw), &net);
        for (g, gen) in net.generators.iter().enumerate() {
            let bus = &net.buses[gen.bus];
            prop_assert!(d.p_gen[g] >= gen.p_min && d.p_gen[g] <= gen.p_max);
            prop_assert!(d.v_gen[g] >= bus.v_min && d.v_gen[g] <= bus.v_max);
        }
    }

    #[test]
    fn clamping_projects_onto_the_interval(q in -10.0..10.0f64, lo in -5.0..0.0f64, width in 0.0..5.0f64) {
        let hi = lo + width;
        let c = clamp_q(q, lo, hi);
        prop_assert!(c >= lo && c <= hi);
        prop_assert_eq!(clamp_q(c, lo, hi), c);
        if q >= lo && q <= hi {
            prop_assert_eq!(c, q);
        }
    }

    #[test]
    fn power_flow_balances_scaled_demand(scale in 0.5..1.3f64) {
        let net = case14();
        let pf = PowerFlow::new(&net);
        let mut spec = PfSpec::from_case(&net);
        for x in spec.loads.p_load.iter_mut().chain(spec.loads.q_load.iter_mut()) {
            *x *= scale;
        }
        let free = pf.solve(&spec, &PfOptions::default()).unwrap();
        prop_assert!(free.point.residual_norm(&opf_learn::powerflow::build_admittance(&net)) < 1e-8);

        let pinned = 1;
        spec.q_fixed.insert(pinned, free.point.q_gen[pinned]);
        let fixed = pf.solve_modified(&spec, &PfOptions::default()).unwrap();
        for (a, b) in fixed.point.voltages.magnitude.iter().zip(&free.point.voltages.magnitude) {
            prop_assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn gibbs_samples_respect_the_box(seed in 0u64..1000, mu in 0.1..0.9f64) {
        let net = case14();
        let (base, _) = net.base_loads();
        let cfg = SamplerConfig::for_network(&net, seed).unwrap().with_mu(mu).unwrap();
        for s in gibbs_sample_loads(&base, &cfg, 50).unwrap() {
            for (&x, &p0) in s.iter().zip(&base) {
                let (a, b) = ((1.0 - mu) * p0, (1.0 + mu) * p0);
                prop_assert!(x >= a.min(b) && x <= a.max(b));
            }
        }
    }

    #[test]
    fn dataset_csv_round_trips(values in prop::collection::vec(-1e3..1e3f64, 1..8)) {
        let (n_load, n_gen) = (2, 3);
        let samples: Vec<TrainingSample> = values
            .iter()
            .enumerate()
            .map(|(k, &v)| TrainingSample {
                id: k as u64,
                x: vec![v, v / 3.0, -v, 0.1],
                y: SetpointVector { alpha: vec![0.25, v.abs() / 1e3], beta: vec![0.0, 1.0, 1.0 / 3.0] },
                objective: v * 7.0,
            })
            .collect();
        let mut buf = Vec::new();
        write_dataset(&mut buf, n_load, n_gen, &samples).unwrap();
        let (l, g, back) = read_dataset(buf.as_slice()).unwrap();
        prop_assert_eq!((l, g), (n_load, n_gen));
        prop_assert_eq!(back, samples);
    }
}

#[test]
fn base_scenario_expands_to_bus_vectors() {
    let net = case14();
    let loads = LoadScenario::base(&net);
    let (p, q) = loads.bus_vectors(&net);
    for (i, bus) in net.buses.iter().enumerate() {
        assert_eq!(p[i], bus.p_load);
        assert_eq!(q[i], bus.q_load);
    }
}
