//! Randomized honest sessions through the simulator: every response is
//! Valid, settlements match the fee schedule, and every channel closes.

use parp_core::fullnode::FeeSchedule;
use parp_core::lightclient::Verdict;
use parp_core::simnet::{
    run, AccountRef, Action, Actor, CallSpec, ClientSpec, Expectation, NetworkConfig, NodeSpec, Scenario,
    ScriptStep, TraceEvent,
};
use proptest::prelude::*;

fn call_spec() -> impl Strategy<Value = CallSpec> {
    prop_oneof![
        (0usize..2).prop_map(|i| CallSpec::GetBalance { of: AccountRef::Actor(Actor::Client(i)) }),
        Just(CallSpec::GetBalance { of: AccountRef::Actor(Actor::Node(0)) }),
        (0u64..40).prop_map(|amount| CallSpec::SendTransaction { to: AccountRef::Actor(Actor::Node(0)), amount }),
        Just(CallSpec::SendMalformed),
        Just(CallSpec::GetChannelStatus),
    ]
}

fn fee(spec: &CallSpec) -> u64 {
    let f = FeeSchedule::default();
    match spec {
        CallSpec::GetBalance { .. } => f.get_balance,
        CallSpec::SendTransaction { .. } | CallSpec::SendMalformed => f.send_transaction,
        CallSpec::GetChannelStatus => f.get_channel_status,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn honest_sessions_are_valid_and_settle(
        seed in any::<u64>(),
        d_max in 1u64..6,
        calls in prop::collection::vec((call_spec(), 1u64..8, 0usize..2), 0..25),
    ) {
        let mut script = vec![
            ScriptStep { at: 1, action: Action::Handshake { client: 0, node: 0 } },
            ScriptStep { at: 2, action: Action::Handshake { client: 1, node: 0 } },
        ];
        let mut t = 30;
        let mut owed = [0u64; 2];
        for (spec, gap, client) in &calls {
            t += gap;
            owed[*client] += fee(spec);
            script.push(ScriptStep { at: t, action: Action::Call { client: *client, call: spec.clone(), repeat: 1, every: 0 } });
        }
        let close_at = t + 600;
        script.push(ScriptStep { at: close_at, action: Action::Close { client: 0 } });
        script.push(ScriptStep { at: close_at, action: Action::Close { client: 1 } });
        let s = Scenario {
            name: "prop".into(),
            seed,
            horizon: close_at + 400,
            network: NetworkConfig { d_min: 1, d_max, ordered: true },
            nodes: vec![NodeSpec::default()],
            clients: vec![ClientSpec { budget: 500, ..Default::default() }; 2],
            script,
            expect: vec![
                Expectation::Settled { client: 0, to_node: owed[0], to_client: 500 - owed[0] },
                Expectation::Settled { client: 1, to_node: owed[1], to_client: 500 - owed[1] },
                Expectation::AllChannelsClosed,
            ],
            ..Default::default()
        };
        let out = run(s.clone()).unwrap();
        prop_assert!(out.passed(), "{:#?}", out.expectations);
        let mut paid = 0;
        for e in &out.trace {
            if let TraceEvent::Verdict { verdict, probe, .. } = e {
                prop_assert_eq!(*verdict, Verdict::Valid);
                paid += usize::from(!probe);
            }
        }
        prop_assert_eq!(paid, calls.len());
        prop_assert_eq!(run(s).unwrap().trace, out.trace);
    }
}
