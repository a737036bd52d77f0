mod common;

use proptest::prelude::*;
use usp_core::costmodel::{RankLayout, Strategy as Degrees};
use usp_core::numerics::{reference_attention, BlockMask, Dims4, SoftmaxState};
use usp_core::simcomm::{spawn, Collective, CommError};
use usp_core::usp::{
    all_to_all_4d, causal_workload, even_partition, run_usp, shard_sequence, zigzag_partition,
    Redistribution, ShardPlan,
};
use usp_core::simcomm::ProcessMesh;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn online_softmax_ignores_block_boundaries(
        seq in 2usize..12,
        cuts in proptest::collection::vec(1usize..11, 0..4),
        causal in any::<bool>(),
        seed in 0u64..1000,
    ) {
        let x = common::qkv::<f64>(1, seq, 2, 2, 4, seed);
        let mut bounds: Vec<usize> = cuts.into_iter().filter(|&c| c < seq).collect();
        bounds.push(0);
        bounds.push(seq);
        bounds.sort_unstable();
        bounds.dedup();
        let positions: Vec<usize> = (0..seq).collect();
        let mut state = SoftmaxState::new(x.q.dims()).unwrap();
        for w in bounds.windows(2) {
            let k = x.k.slice_seq(w[0], w[1] - w[0]).unwrap();
            let v = x.v.slice_seq(w[0], w[1] - w[0]).unwrap();
            let mask = BlockMask::new(causal, &positions, &positions[w[0]..w[1]]);
            state.update(&x.q, &k, &v, mask).unwrap();
        }
        let got = state.finalize().unwrap().output;
        let want = reference_attention(&x.q, &x.k, &x.v, causal, None).unwrap();
        prop_assert!(got.max_abs_diff(&want).unwrap() <= 1e-12);
    }

    #[test]
    fn partitions_cover_every_pair(half_chunk in 1usize..6, ring in 1usize..6) {
        let seq = 2 * ring * half_chunk;
        let total = (seq * (seq + 1) / 2) as u64;
        let zz = zigzag_partition(seq, ring).unwrap();
        let even = even_partition(seq, ring).unwrap();
        for part in [&zz, &even] {
            let mut all: Vec<usize> = part.iter().flatten().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..seq).collect::<Vec<_>>());
            prop_assert_eq!(causal_workload(part, seq).iter().sum::<u64>(), total);
        }
        let w = causal_workload(&zz, seq);
        prop_assert!(w.iter().all(|&x| x == w[0]));
    }

    #[test]
    fn all_to_all_4d_round_trips(
        u_pow in 0u32..3,
        r in 1usize..3,
        chunk in 1usize..3,
        causal in any::<bool>(),
        seed in 0u64..1000,
    ) {
        let u = 1usize << u_pow;
        let seq = 2 * r * u * chunk;
        let mesh = ProcessMesh::new(u, r).unwrap();
        let plan = ShardPlan::for_mask(seq, mesh, causal).unwrap();
        let x = common::qkv::<f64>(1, seq, 2 * u, u, 3, seed);
        let out = spawn(mesh.world_size(), |rank| -> Result<bool, usp_core::usp::UspError> {
            let shard = shard_sequence(&plan, &x.q, rank.rank())?;
            let heads = all_to_all_4d(rank, &shard, Redistribution::ScatterHeads, &plan)?;
            let back = all_to_all_4d(rank, &heads, Redistribution::ScatterSequence, &plan)?;
            Ok(back == shard)
        }).unwrap();
        prop_assert!(out.results.iter().all(|&b| b));
    }

    #[test]
    fn rank_layout_is_a_bijection(
        tp in 1u64..4, ulysses in 1u64..4, ring in 1u64..4, dp in 1u64..3, pp in 1u64..3,
    ) {
        let l = RankLayout::new(Degrees { tp, ulysses, ring, dp, pp, ..Degrees::default() });
        let n = l.world_size();
        let mut seen = std::collections::HashSet::new();
        for rank in 0..n {
            let c = l.coords(rank);
            prop_assert_eq!(l.rank(c), rank);
            prop_assert!(seen.insert((c.tp, c.ulysses, c.ring, c.dp, c.pp)));
        }
    }

    #[test]
    fn ledger_matches_closed_forms(n in 1usize..7, per in 1usize..5) {
        let len = n * per;
        let out = spawn(n, |rank| -> Result<(), CommError> {
            let g = rank.world_group();
            let x = vec![rank.rank() as f64; len];
            rank.all_reduce(&g, &x)?;
            let part = rank.reduce_scatter(&g, &x)?;
            rank.all_gather(&g, &part)?;
            rank.all_to_all(&g, (0..n).map(|_| vec![1.0f64; per]).collect())?;
            rank.ring_shift(&g, x)?;
            Ok(())
        }).unwrap();
        let payload = (len * 8) as f64;
        let nf = n as f64;
        let ranks = nf;
        let expect = |c: Collective| ranks * c.bytes_sent(payload, n);
        for c in Collective::ALL {
            prop_assert!((out.ledger.bytes_of(c) - expect(c)).abs() <= 1e-9 * payload * nf);
            prop_assert_eq!(out.ledger.events(c), 1);
        }
    }

    #[test]
    fn usp_matches_reference_on_random_meshes(
        u_pow in 0u32..3,
        r in 1usize..4,
        kv_mult in 1usize..3,
        causal in any::<bool>(),
        seed in 0u64..1000,
    ) {
        let u = 1usize << u_pow;
        let kv = u * kv_mult;
        let seq = 2 * r * u;
        let x = common::qkv::<f64>(1, seq, 2 * kv, kv, 4, seed);
        let run = run_usp(ProcessMesh::new(u, r).unwrap(), &x.q, &x.k, &x.v, Some(&x.d_o), causal).unwrap();
        let want = reference_attention(&x.q, &x.k, &x.v, causal, None).unwrap();
        prop_assert!(run.output.max_abs_diff(&want).unwrap() <= 1e-12);
        prop_assert_eq!(run.output.dims(), Dims4::new(1, seq, 2 * kv, 4));
    }
}
