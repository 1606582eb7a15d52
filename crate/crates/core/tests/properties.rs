use proptest::prelude::*;
use sttsim_core::attack::{AttackEpisode, AttackWaveform, Profile};
use sttsim_core::golden::GoldenMemory;
use sttsim_core::mitigation::CommitMode;
use sttsim_core::trace::AccessKind;
use sttsim_core::{simulate, Engine, EngineEvent, PolicyKind, RunConfig, Trace};

fn small_config() -> RunConfig {
    RunConfig::parse(
        "l1.size = 1K\n l1.ways = 2\n l2.size = 2K\n l2.ways = 2\n\
         llc.size = 8K\n llc.ways = 4\n llc.banks = 2\n llc.write_buffer = 4\n\
         checkpoint.interval = 15000\n check.exclusivity_interval = 50\n",
    )
    .unwrap()
}

fn trace() -> impl Strategy<Value = Trace> {
    prop::collection::vec((any::<bool>(), 0u64..400), 1..1500).prop_map(|v| {
        Trace::from_accesses(v.into_iter().map(|(w, line)| {
            let kind = if w { AccessKind::Write } else { AccessKind::Read };
            (kind, 0x8000 + line * 64 + (line % 7))
        }))
    })
}

fn waveform() -> impl Strategy<Value = AttackWaveform> {
    prop::collection::vec((1u64..20_000, 100u64..30_000, any::<bool>(), 0.0f64..4.0), 0..4).prop_map(|eps| {
        let mut at = 0;
        let mut out = Vec::new();
        for (gap, len, ramp, peak) in eps {
            let start = at + gap;
            let profile = if ramp { Profile::Ramp } else { Profile::Step };
            out.push(AttackEpisode::new(start, start + len, profile, peak));
            at = start + len;
        }
        AttackWaveform::new(out).unwrap()
    })
}

fn policy() -> impl Strategy<Value = PolicyKind> {
    prop::sample::select(PolicyKind::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn accounting_identities_hold(t in trace(), w in waveform(), p in policy(), volatile in any::<bool>()) {
        let mut cfg = small_config();
        cfg.policy.kind = p;
        cfg.attack = w;
        if volatile {
            cfg.policy.commit_mode = CommitMode::Volatile;
        }
        // The engine itself checks exclusivity, the cycle identity and the
        // request identity; any violation is an error here.
        let r = simulate(&cfg, &t).unwrap();
        prop_assert!(r.events.requests_executed >= r.events.useful_requests);
        prop_assert_eq!(r.cycles.total, r.cycles.sum_of_parts());
        prop_assert_eq!(r.energy.total, cfg.energy.energy(&r.events.energy_events));
        let l = &r.events.levels;
        prop_assert_eq!(l.l1_hits + l.l1_misses, r.events.requests_executed);
        prop_assert_eq!(l.l2_hits + l.l2_misses, l.l1_misses);
        if p == PolicyKind::CheckpointBypass {
            prop_assert_eq!(r.corrupted_reads, 0);
        }
        if p != PolicyKind::CheckpointBypass {
            prop_assert_eq!(r.events.re_executed_requests, 0);
        }
    }

    #[test]
    fn checkpoints_commit_exactly_the_prefix(t in trace(), w in waveform()) {
        let mut cfg = small_config();
        cfg.policy.kind = PolicyKind::CheckpointBypass;
        cfg.attack = w;
        let mut bad = None;
        let mut engine = Engine::new(&cfg, &t).unwrap();
        engine
            .run_in_place(&mut |ev: EngineEvent<'_>| {
                if let EngineEvent::Checkpoint { checkpoint, memory } = ev {
                    let mut g = GoldenMemory::new(64);
                    for r in &t.requests()[..checkpoint.trace_index] {
                        g.apply(r);
                    }
                    if checkpoint.golden_snapshot != g || !memory.matches(&g) {
                        bad.get_or_insert(checkpoint.trace_index);
                    }
                }
            })
            .unwrap();
        prop_assert_eq!(bad, None);
        let mut g = GoldenMemory::new(64);
        for r in t.requests() {
            g.apply(r);
        }
        prop_assert_eq!(engine.golden(), &g);
    }

    #[test]
    fn canonical_text_round_trips(
        seed in any::<u64>(),
        p in policy(),
        interval in prop::option::of(1u64..1_000_000),
        w in waveform(),
        lat in 1u64..500,
    ) {
        let mut cfg = RunConfig { seed, attack: w, ..RunConfig::default() };
        cfg.policy.kind = p;
        cfg.policy.checkpoint_interval = interval.unwrap_or(u64::MAX);
        cfg.hierarchy.mem_latency = lat;
        let back = RunConfig::parse(&cfg.canonical_text()).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.hash(), cfg.hash());
    }
}
