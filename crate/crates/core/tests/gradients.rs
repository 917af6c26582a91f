mod common;

use common::{check_ppo_point, check_primitive, primitives, FD_TOLERANCE};
use helm::agent::AgentKind;
use helm::rng::Rng;

#[test]
fn every_primitive_matches_central_differences() {
    for (i, p) in primitives().iter().enumerate() {
        let err = check_primitive(p, 20, 1000 + i as u64);
        assert!(err < FD_TOLERANCE, "{}: relative error {err:e}", p.name);
    }
}

#[test]
fn ppo_loss_gradient_for_each_agent_kind() {
    let mut rng = Rng::new(3);
    for kind in [AgentKind::Helm, AgentKind::Markov, AgentKind::Recurrent] {
        for _ in 0..5 {
            let err = check_ppo_point(kind, &mut rng);
            assert!(err < FD_TOLERANCE, "{kind}: relative error {err:e}");
        }
    }
}
