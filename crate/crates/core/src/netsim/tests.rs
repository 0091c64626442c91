use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::scenario::{build_scenario, Scenario, ScenarioKind};
use crate::Error;

fn sleep_all(s: &Scenario) -> Vec<BlueAction> {
    vec![BlueAction::Sleep; s.n_agents()]
}

fn run_sleeping(s: &Scenario, steps: usize, seed: u64) -> (Env, Vec<StepResult>) {
    let (mut env, _) = Env::new(s, seed).unwrap();
    let results = (0..steps).map(|_| env.step(&sleep_all(s)).unwrap()).collect();
    (env, results)
}

#[test]
fn reset_is_clean_and_silent() {
    for kind in ScenarioKind::ALL {
        let s = build_scenario(kind);
        let (state, obs) = reset(&s).unwrap();
        assert!(state.hosts.iter().all(|h| h.red_access == Access::None));
        assert!(state.hosts.iter().all(|h| h.event_flags == EventFlags::default()));
        assert_eq!(state.red.stage, RedStage::ScanSubnet);
        assert_eq!(state.step, 0);
        assert!(obs.iter().all(|o| o.is_zero() && o.len() == s.obs_len()));
    }
    let s = build_scenario(ScenarioKind::Homogeneous);
    let (state, _) = reset(&s).unwrap();
    assert_eq!(state.hosts.len(), 6);
    assert_eq!(state.subnets.len(), 2);
    assert_eq!(state.hosts.iter().filter(|h| h.is_op_server).count(), 1);
    assert_eq!(reset(&s).unwrap(), reset(&s).unwrap());
}

#[test]
fn invalid_scenario_is_a_configuration_error() {
    let mut s = build_scenario(ScenarioKind::Homogeneous);
    s.op_server = 40;
    assert!(matches!(reset(&s), Err(Error::Config(_))));
}

#[test]
fn red_follows_the_kill_chain() {
    let s = build_scenario(ScenarioKind::Homogeneous);
    let (_, results) = run_sleeping(&s, 14, 1);
    let actions: Vec<String> = results
        .iter()
        .map(|r| r.info.red.as_ref().unwrap().action.to_string())
        .collect();
    let expected = [
        "ScanSubnet(0)",
        "ScanHost(0)",
        "Exploit(0)",
        "Escalate(0)",
        "ScanHost(1)",
        "Exploit(1)",
        "Escalate(1)",
        "ScanHost(2)",
        "Exploit(2)",
        "Escalate(2)",
        "Pivot(2)",
        "Impact(5)",
        "Impact(5)",
        "Impact(5)",
    ];
    assert_eq!(actions, expected);
    let last = &results.last().unwrap().next_state;
    assert_eq!(last.hosts[5].red_access, Access::Privileged);
    assert_eq!(last.red.current_subnet, 1);
    // three privileged entry hosts plus the OpServer
    assert_eq!(results.last().unwrap().team_reward, -3.0 + -1.0 + -1.0 + -1.0);
}

#[test]
fn user_foothold_leads_to_escalate() {
    let s = build_scenario(ScenarioKind::Homogeneous);
    let (mut state, _) = reset(&s).unwrap();
    state.red.stage = RedStage::Escalate;
    state.red.target_host = Some(1);
    state.hosts[1].grant(Access::User);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let rec = red_step(&s, &mut state, &mut rng);
    assert_eq!(rec.action, RedAction::Escalate(1));
    assert!(rec.success);
    assert_eq!(state.hosts[1].red_access, Access::Privileged);
}

#[test]
fn blocked_pivot_fails_without_state_change() {
    let s = build_scenario(ScenarioKind::Homogeneous);
    let (mut state, _) = reset(&s).unwrap();
    state.red.stage = RedStage::Pivot;
    state.red.target_host = Some(2);
    state.hosts[2].grant(Access::Privileged);
    for blocked in [0, 1] {
        let mut st = state.clone();
        st.subnets[blocked].blocked = true;
        let before = st.clone();
        let rec = red_step(&s, &mut st, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(rec.action, RedAction::Pivot(2));
        assert!(!rec.success);
        assert_eq!(st.hosts, before.hosts);
        assert_eq!(st.red.stage, RedStage::Pivot);
        assert_eq!(st.red.retry_count, before.red.retry_count + 1);
    }
}

#[test]
fn lost_pivot_foothold_sends_red_back() {
    let s = build_scenario(ScenarioKind::Homogeneous);
    let (mut state, _) = reset(&s).unwrap();
    state.red.stage = RedStage::Impact;
    state.red.current_subnet = 1;
    let rec = red_step(&s, &mut state, &mut ChaCha8Rng::seed_from_u64(0));
    assert!(!rec.success);
    assert_eq!(state.red.stage, RedStage::Exploit);
    assert_eq!(state.red.target_host, Some(2));
    assert_eq!(state.red.current_subnet, 0);
}

#[test]
fn step_reward_examples() {
    let s = build_scenario(ScenarioKind::Homogeneous);
    let (state, _) = reset(&s).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let r = step(&s, &state, &sleep_all(&s), &mut rng).unwrap();
    assert_eq!(r.team_reward, 0.0);

    let mut s_quiet = s.clone();
    s_quiet.red_active = false;
    let mut st = state.clone();
    st.hosts[5].grant(Access::Privileged);
    let r = step(&s_quiet, &st, &sleep_all(&s), &mut rng).unwrap();
    assert_eq!(r.team_reward, s.rewards.opserver_privileged);

    let mut st = state.clone();
    st.hosts[4].grant(Access::User);
    let r = step(&s_quiet, &st, &sleep_all(&s), &mut rng).unwrap();
    assert_eq!(r.team_reward, s.rewards.host_user);

    let mut st = state.clone();
    st.hosts[3].grant(Access::Privileged);
    let joint = vec![BlueAction::Sleep, BlueAction::Restore(3)];
    let r = step(&s_quiet, &st, &joint, &mut rng).unwrap();
    assert_eq!(r.next_state.hosts[3].red_access, Access::None);
    assert_eq!(r.team_reward, s.rewards.restore_cost);
}

#[test]
fn actions_outside_the_space_are_contract_errors() {
    let s = build_scenario(ScenarioKind::Heterogeneous);
    let (state, _) = reset(&s).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    // subnet agents cannot block in this scenario
    let joint = vec![BlueAction::Block(0), BlueAction::Sleep, BlueAction::Sleep];
    assert!(matches!(step(&s, &state, &joint, &mut rng), Err(Error::Contract(_))));
    // nor act on the other subnet's hosts
    let joint = vec![BlueAction::Analyse(4), BlueAction::Sleep, BlueAction::Sleep];
    assert!(matches!(step(&s, &state, &joint, &mut rng), Err(Error::Contract(_))));
    let joint = vec![BlueAction::Sleep; 2];
    assert!(matches!(step(&s, &state, &joint, &mut rng), Err(Error::Contract(_))));
    let mut done = state.clone();
    done.done = true;
    assert!(matches!(step(&s, &done, &sleep_all(&s), &mut rng), Err(Error::Contract(_))));
}

#[test]
fn apply_blue_examples() {
    let s = build_scenario(ScenarioKind::HostBased);
    let (mut state, _) = reset(&s).unwrap();
    state.hosts[1].grant(Access::Privileged);
    assert_eq!(apply_blue(&s, &mut state, 1, BlueAction::Remove(1)).unwrap(), 0.0);
    assert_eq!(state.hosts[1].red_access, Access::Privileged);

    let cost = apply_blue(&s, &mut state, 0, BlueAction::Analyse(0)).unwrap();
    assert_eq!(cost, s.rewards.analyse_unnecessary_cost);
    assert_eq!(cost, -0.5);
    assert_eq!(state.hosts[0].known_compromise, KnownCompromise::Clean);
    assert_eq!(apply_blue(&s, &mut state, 1, BlueAction::Analyse(1)).unwrap(), 0.0);
    assert_eq!(state.hosts[1].known_compromise, KnownCompromise::Privileged);

    let fw = s.n_agents() - 1;
    let justified = apply_blue(&s, &mut state, fw, BlueAction::Block(0)).unwrap();
    assert_eq!(justified, s.rewards.block_cost + s.rewards.block_justified_discount);
    let unjustified = apply_blue(&s, &mut state, fw, BlueAction::Block(1)).unwrap();
    assert_eq!(unjustified, s.rewards.block_cost);
    assert!(state.subnets.iter().all(|n| n.blocked));
    assert_eq!(apply_blue(&s, &mut state, fw, BlueAction::Unblock(1)).unwrap(), 0.0);
    assert!(!state.subnets[1].blocked);

    state.hosts[2].grant(Access::User);
    apply_blue(&s, &mut state, 2, BlueAction::Remove(2)).unwrap();
    assert_eq!(state.hosts[2].red_access, Access::None);

    state.hosts[5].grant(Access::Privileged);
    state.hosts[5].event_flags.exploit_alert = true;
    let cost = apply_blue(&s, &mut state, 5, BlueAction::Restore(5)).unwrap();
    assert_eq!(cost, s.rewards.restore_opserver_cost);
    assert_eq!(state.hosts[5].red_access, Access::None);
    assert_eq!(state.hosts[5].event_flags, EventFlags::default());
    assert_eq!(state.hosts[5].known_compromise, KnownCompromise::Clean);

    let before = state.clone();
    apply_blue(&s, &mut state, 0, BlueAction::Sleep).unwrap();
    assert_eq!(state, before);
}

#[test]
fn firewall_sees_only_blocked_bits() {
    let s = build_scenario(ScenarioKind::Heterogeneous);
    let fw = s.agents.last().unwrap();
    let (mut state, _) = reset(&s).unwrap();
    state.subnets[1].blocked = true;
    state.hosts[0].event_flags.exploit_alert = true;
    let o = observe(&state, fw);
    assert_eq!(fw.raw_obs_len, 2);
    assert_eq!(&o.bits()[..2], &[0, 1]);
    assert!(o.bits()[2..].iter().all(|b| *b == 0));
}

#[test]
fn observation_layout() {
    let s = build_scenario(ScenarioKind::Homogeneous);
    let (mut state, _) = reset(&s).unwrap();
    state.hosts[4].event_flags.scan_seen = true;
    state.hosts[5].known_compromise = KnownCompromise::Privileged;
    state.hosts[3].known_compromise = KnownCompromise::User;
    state.subnets[1].blocked = true;
    let o = observe(&state, &s.agents[1]);
    assert_eq!(o.bits(), &[0, 0, 1, 0, 1, 0, 0, 0, 0, 0, 0, 1, 1]);
    assert!(observe(&state, &s.agents[0]).is_zero());
}

/// Sets up red one step before exploiting host 0 and returns whether the
/// exploit raised an alert.
fn one_exploit(s: &Scenario, seed: u64) -> bool {
    let (mut state, _) = reset(s).unwrap();
    state.red.stage = RedStage::Exploit;
    state.red.target_host = Some(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = step(s, &state, &sleep_all(s), &mut rng).unwrap();
    assert_eq!(r.info.detections.len(), 1);
    let alert = r.joint_obs[0].bits()[1] == 1;
    assert_eq!(alert, r.info.detections[0].1);
    alert
}

#[test]
fn detection_frequency_is_one_half() {
    let s = build_scenario(ScenarioKind::Homogeneous);
    let trials = 10_000;
    let hits = (0..trials).filter(|seed| one_exploit(&s, *seed)).count();
    let freq = hits as f64 / trials as f64;
    assert!((0.48..=0.52).contains(&freq), "{freq}");
}

fn random_joint(s: &Scenario, rng: &mut ChaCha8Rng) -> Vec<BlueAction> {
    s.agents
        .iter()
        .map(|a| a.action_space[rng.random_range(0..a.action_space.len())])
        .collect()
}

#[test]
fn randomized_episodes_keep_the_invariants() {
    for kind in [ScenarioKind::Homogeneous, ScenarioKind::Heterogeneous, ScenarioKind::HostBased] {
        let s = build_scenario(kind);
        let op_subnet = s.op_subnet();
        for seed in 0..200 {
            let mut pick = ChaCha8Rng::seed_from_u64(10_000 + seed);
            let (mut env, _) = Env::new(&s, seed).unwrap();
            while !env.state().done {
                let before = env.state().clone();
                let joint = random_joint(&s, &mut pick);
                let r = env.step(&joint).unwrap();
                let after = &r.next_state;

                // reward decomposition, exact
                let sum = r.info.items.iter().fold(0.0, |a, i| a + i.amount);
                assert_eq!(sum, r.team_reward);

                // block soundness: nothing crosses a link blocked during red's move
                let red = r.info.red.as_ref().unwrap();
                let blocked_now = after.subnets[0].blocked || after.subnets[op_subnet].blocked;
                if blocked_now && matches!(red.action, RedAction::Pivot(_) | RedAction::Impact(_)) {
                    assert!(!red.success);
                    let op = s.op_server;
                    assert!(after.hosts[op].red_access <= before.hosts[op].red_access
                        || joint.contains(&BlueAction::Restore(op)));
                }

                for (b, a) in before.hosts.iter().zip(&after.hosts) {
                    // knowledge never overstates what red has held since restore
                    assert!(a.known_compromise.claimed() <= a.peak_access);
                    assert!(a.red_access <= a.peak_access);
                    // knowledge only falls through Analyse or Restore
                    let touched = joint.iter().any(|j| {
                        matches!(j, BlueAction::Analyse(h) | BlueAction::Restore(h) if *h == a.host_id)
                    });
                    if !touched {
                        assert!(a.known_compromise.claimed() >= b.known_compromise.claimed());
                        assert!(
                            !(b.known_compromise != KnownCompromise::Unknown
                                && a.known_compromise == KnownCompromise::Unknown)
                        );
                    }
                }
                assert_eq!(after.done, after.step == s.horizon);
            }
        }
    }
}

#[test]
fn equal_seeds_and_actions_give_identical_trajectories() {
    let s = build_scenario(ScenarioKind::HostBased);
    let run = |seed| {
        let mut pick = ChaCha8Rng::seed_from_u64(99);
        let (mut env, _) = Env::new(&s, seed).unwrap();
        let mut out = vec![];
        while !env.state().done {
            let j = random_joint(&s, &mut pick);
            out.push(env.step(&j).unwrap());
        }
        out
    };
    assert_eq!(run(3), run(3));
}

#[test]
fn index_actions_map_to_the_space() {
    let s = build_scenario(ScenarioKind::Homogeneous);
    let (env, _) = Env::new(&s, 0).unwrap();
    let joint = env.actions_from_indices(&[0, 12]).unwrap();
    assert_eq!(joint, vec![BlueAction::Sleep, BlueAction::Unblock(1)]);
    assert!(env.actions_from_indices(&[0, 13]).is_err());
    assert!(env.actions_from_indices(&[0]).is_err());
}

#[test]
fn brute_force_edge_cases() {
    let micro = build_scenario(ScenarioKind::Micro);
    assert_eq!(brute_force_value(&micro, 0, BRUTE_FORCE_BUDGET).unwrap(), 0.0);
    let mut quiet = micro.clone();
    quiet.red_active = false;
    assert_eq!(brute_force_value(&quiet, 3, BRUTE_FORCE_BUDGET).unwrap(), 0.0);
    match brute_force_value(&build_scenario(ScenarioKind::HostBased), 4, BRUTE_FORCE_BUDGET) {
        Err(Error::Budget { leaves, budget }) => {
            assert_eq!(leaves, (4u128.pow(6) * 5).pow(4));
            assert_eq!(budget, BRUTE_FORCE_BUDGET);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn micro_brute_force_fixture() {
    // Red scans at t0 and t1, exploits host 0 at t2 (User, -0.1) and would
    // escalate at t3 (-1). Blue's best reply is a free Remove(0) at t3, which
    // makes the escalation fail: the only unavoidable loss is the t2 penalty.
    let micro = build_scenario(ScenarioKind::Micro);
    assert_eq!(joint_action_count(&micro), 49);
    let v = brute_force_value(&micro, 4, BRUTE_FORCE_BUDGET).unwrap();
    assert_eq!(v, -0.1);

    let (mut env, _) = Env::new(&micro, 0).unwrap();
    let mut total = 0.0;
    for t in 0..4 {
        let a = if t == 3 { BlueAction::Remove(0) } else { BlueAction::Sleep };
        total += env.step(&[a, BlueAction::Sleep]).unwrap().team_reward;
    }
    assert_eq!(total, -0.1);
}
