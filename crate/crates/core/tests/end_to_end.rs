use nalgebra::{DMatrix, DVector};
use tdmjls::analysis::{self, AnalysisMode};
use tdmjls::mc::{self, McConfig};
use tdmjls::mjls;
use tdmjls::tdmodel::{self, PolicyEvalProblem};
use tdmjls::{JumpLinearSystem, MarkovChain};

fn td_problem() -> PolicyEvalProblem {
    PolicyEvalProblem {
        transitions: DMatrix::from_row_slice(3, 3, &[0.2, 0.8, 0.0, 0.0, 0.2, 0.8, 0.8, 0.0, 0.2]),
        rewards: DVector::from_column_slice(&[1.0, 0.0, -1.0]),
        gamma: 0.8,
        features: DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]),
        initial_state: Some(DVector::from_column_slice(&[1.0, 0.0, 0.0])),
    }
}

#[test]
fn td_error_settles_at_predicted_level() {
    let model = tdmodel::build_td0(&td_problem(), 0.05).unwrap();
    // A lazy cycle: six reachable pairs out of nine.
    assert_eq!(model.pairs.len(), 6);
    let report = analysis::stability_report(&model.sys, AnalysisMode::Markov).unwrap();
    assert!(report.stable);

    let xi0 = -&model.theta_star;
    let m0 = mjls::initial_moments(&model.sys, &xi0).unwrap();
    let run = analysis::markov_trajectory_with_limits(&model.sys, &m0, 3000).unwrap();
    let last = *run.mse.last().unwrap();
    assert!((last - run.steady.delta_inf).abs() <= 1e-8 * run.steady.delta_inf.max(1e-300) + 1e-14);

    let est = mc::simulate_moments(
        &model.sys,
        &xi0,
        &McConfig {
            trajectories: 20_000,
            horizon: 60,
            base_seed: 1,
            record_steps: vec![60],
        },
    )
    .unwrap();
    let s = est.at(60).unwrap();
    let se = s.se.as_ref().unwrap().mse;
    assert!((s.value.mse - run.mse[60]).abs() <= 4.0 * se + 1e-12);
}

#[test]
fn sweep_delta_matches_direct_steady_state() {
    let chain = MarkovChain::new(
        DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.1, 0.9]),
        DVector::from_column_slice(&[0.5, 0.5]),
    )
    .unwrap();
    let sys = JumpLinearSystem::new(
        chain,
        vec![
            DMatrix::from_element(1, 1, -1.0),
            DMatrix::from_element(1, 1, -2.0),
        ],
        vec![
            DVector::from_element(1, 1.0),
            DVector::from_element(1, -1.0),
        ],
        0.1,
    )
    .unwrap();
    let alphas = [0.001, 0.01, 0.1, 2.0];
    let rows = analysis::alpha_sweep(&sys, AnalysisMode::Markov, &alphas).unwrap();
    for (row, &a) in rows.iter().zip(&alphas) {
        assert_eq!(row.alpha, a);
        match row.delta_inf {
            Some(d) => {
                let direct =
                    analysis::build_markov_steady_state(&sys.with_alpha(a).unwrap()).unwrap();
                assert!((d - direct.delta_inf).abs() <= 1e-14 * d);
            }
            None => assert!(!row.stable && row.sigma_h22 >= 1.0),
        }
    }
    assert!(!rows[3].stable);
}
