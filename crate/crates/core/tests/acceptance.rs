//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Pass criterion numbers as arguments to
//! run a subset, e.g. `cargo test --test acceptance -- 1 4 9`.

use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use masd::dataset::{collect, segment, CollectorPolicy, SegmentBatch, SkillSegment};
use masd::env::{task, N_ACTIONS, N_MAX, OBS_DIM, STATE_DIM};
use masd::grouper::{grouper_ppo_config, Grouper, GrouperInput, GroupingContext, Partition};
use masd::nn::{finite_diff_check, ParameterSet, Role, Tape, Tensor};
use masd::rng::{stream, Rng};
use masd::runtime::{assign_rule, skill_fingerprint, train_downstream, train_flat, DownstreamConfig, FlatAgent, Manner, SkillAgent, TrainOutcome};
use masd::vq::{quantize, Aggregator, Codebook3D, Discovery, DiscoveryConfig, Method, SkillModel, Terms};
use rand::Rng as _;

type Outcome = Result<String, String>;

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn uniform_rows(n: usize, d: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let t = start.elapsed();
    if t <= limit {
        Ok(())
    } else {
        Err(format!("took {:.1}s, limit {:.0}s", t.as_secs_f64(), limit.as_secs_f64()))
    }
}

fn quantization_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = stream(101, "acceptance/quantize");
    let mut checked = 0;
    for q in 0..500 {
        let k = rng.random_range(1..=32);
        let d = rng.random_range(1..=8);
        let m = rng.random_range(1..=5);
        let sizes: Vec<usize> = (1..=m).collect();
        let mut cb = Codebook3D::new(d, k, &sizes, &mut rng);
        // duplicated codes exercise the lowest-index tie rule
        if q % 7 == 0 && k > 1 {
            let t = cb.tables.get_mut(&format!("E3d/m{m}")).unwrap();
            let w = m * d;
            let first = t.data()[..w].to_vec();
            t.data_mut()[(k - 1) * w..k * w].copy_from_slice(&first);
        }
        let z: Vec<f64> = (0..m * d).map(|_| rng.random_range(-1.5..1.5)).collect();
        let table = cb.tables.get(&format!("E3d/m{m}")).unwrap().clone();
        let mut best = (usize::MAX, f64::INFINITY);
        for c in 0..k {
            let dist = sq(&z, &table.data()[c * m * d..(c + 1) * m * d]);
            if dist < best.1 {
                best = (c, dist);
            }
        }
        let got = cb.quantize_subgroup(&z, m).map_err(|e| e.to_string())?;
        let rows: Vec<f64> = got.rows.concat();
        if got.index != best.0 || rows != table.data()[best.0 * m * d..(best.0 + 1) * m * d] || got.codebook_loss != best.1 {
            return Err(format!("query {q}: subgroup code {} vs scan {}", got.index, best.0));
        }
        if m == 1 {
            let flat = Tensor::new(vec![k, d], table.data().to_vec()).unwrap();
            let single = quantize(&z, &flat).map_err(|e| e.to_string())?;
            if single.index != best.0 || single.code != flat.row(best.0) {
                return Err(format!("query {q}: code {} vs scan {}", single.index, best.0));
            }
        }
        checked += 1;
    }
    within(Duration::from_secs(5), start)?;
    Ok(format!("{checked}/500 queries match the exhaustive scan"))
}

fn toy_batch(n: usize, h: usize, obs: usize, rng: &mut Rng) -> SegmentBatch {
    let segments = (0..n)
        .map(|agent| SkillSegment {
            agent,
            start_time: 0,
            obs: uniform_rows(h, obs, rng),
            acts: (0..h).map(|_| rng.random_range(0..N_ACTIONS)).collect(),
            valid: vec![true; h],
            start_state: vec![0.0; STATE_DIM],
        })
        .collect();
    SegmentBatch {
        episode: 0,
        task_id: "toy".into(),
        start_time: 0,
        start_state: vec![0.0; STATE_DIM],
        segments,
    }
}

fn toy_config(method: Method) -> DiscoveryConfig {
    DiscoveryConfig {
        method,
        horizon: 3,
        d: 3,
        k: 4,
        d_top: 2,
        k_top: 3,
        heads: 2,
        attn_width: 4,
        hidden: 6,
        sizes: vec![1, 2, 3],
        ..DiscoveryConfig::default()
    }
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let cases = [
        (Method::ThreeD, 2, Partition::whole(2)),
        (Method::ThreeD, 3, Partition::new(vec![vec![0, 2], vec![1]], 3).unwrap()),
        (Method::Hier, 2, Partition::whole(2)),
        (Method::Hier, 3, Partition::new(vec![vec![0, 1], vec![2]], 3).unwrap()),
    ];
    for (i, (method, n, partition)) in cases.iter().enumerate() {
        let mut model = SkillModel::new(toy_config(*method), 4).map_err(|e| e.to_string())?;
        if let Some(agg) = model.agg.as_mut() {
            for name in ["agg/query", "agg/wk"] {
                agg.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v *= 6.0);
            }
            model.enc.scale(2.0);
        }
        let batch = toy_batch(*n, 3, 4, &mut stream(102 + i as u64, "acceptance/grad"));
        let params = model.merged_params();
        let err = finite_diff_check(&params, &[], 1e-4, |tape, bound, _| {
            model.build_loss(tape, bound, &[(&batch, partition)], Terms::ALL).unwrap().total
        })
        .map_err(|e| e.to_string())?;
        worst = worst.max(err);
    }
    if worst >= 1e-5 {
        return Err(format!("max relative error {worst:.2e}"));
    }
    for method in [Method::ThreeD, Method::Single] {
        let model = SkillModel::new(toy_config(method), 4).map_err(|e| e.to_string())?;
        let batch = toy_batch(3, 3, 4, &mut stream(110, "acceptance/st"));
        let p = Partition::new(vec![vec![0, 1], vec![2]], 3).unwrap();
        let p = model.effective_partition(&p);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let terms = Terms {
            recon: true,
            codebook: false,
            commitment: false,
        };
        let g = model.build_loss(&mut tape, &bound, &[(&batch, &p)], terms).map_err(|e| e.to_string())?;
        let grads = tape.backward(g.total).map_err(|e| e.to_string())?;
        let (ge, gq) = (grads.wrt(g.z_e).unwrap(), grads.wrt(g.z_q).unwrap());
        if ge != gq || gq.iter().all(|v| *v == 0.0) {
            return Err(format!("{method}: encoder gradient differs from the decoder gradient at the code"));
        }
    }
    within(Duration::from_secs(30), start)?;
    Ok(format!("max relative error {worst:.2e} < 1e-5; straight-through gradients identical"))
}

fn gradient_routing() -> Outcome {
    let start = Instant::now();
    let mut rng = stream(103, "acceptance/routing");
    let model = SkillModel::new(toy_config(Method::Hier), 4).map_err(|e| e.to_string())?;
    let (d, dt) = (model.config.d, model.config.d_top);
    let mut min_member = f64::INFINITY;
    let mut max_other: f64 = 0.0;
    for _ in 0..50 {
        let batch = toy_batch(3, 3, 4, &mut rng);
        let base = uniform_rows(3, d + dt, &mut rng);
        let nll0 = model.per_agent_nll(&batch, &base).map_err(|e| e.to_string())?;
        // subgroup {0, 1} shares its top code; agent 2 is alone
        let mut top = base.clone();
        let delta: Vec<f64> = (0..dt).map(|_| rng.random_range(-0.5..0.5)).collect();
        for row in top.iter_mut().take(2) {
            row[d..].iter_mut().zip(&delta).for_each(|(v, dv)| *v += dv);
        }
        let nll = model.per_agent_nll(&batch, &top).map_err(|e| e.to_string())?;
        min_member = min_member.min((nll[0] - nll0[0]).abs()).min((nll[1] - nll0[1]).abs());
        max_other = max_other.max((nll[2] - nll0[2]).abs());

        let owner = rng.random_range(0..3);
        let mut btm = base.clone();
        btm[owner][rng.random_range(0..d)] += rng.random_range(0.1..0.5);
        let nll = model.per_agent_nll(&batch, &btm).map_err(|e| e.to_string())?;
        for i in 0..3 {
            let change = (nll[i] - nll0[i]).abs();
            if i == owner {
                min_member = min_member.min(change);
            } else {
                max_other = max_other.max(change);
            }
        }
    }
    if min_member <= 0.0 || max_other != 0.0 {
        return Err(format!("smallest routed change {min_member:.2e}, largest leaked change {max_other:.2e}"));
    }
    within(Duration::from_secs(10), start)?;
    Ok(format!("routed |dNLL| >= {min_member:.2e}, unrouted |dNLL| = 0 exactly"))
}

fn subsets(n: usize, m: usize) -> Vec<Vec<usize>> {
    (0u32..1 << n)
        .filter(|mask| mask.count_ones() as usize == m)
        .map(|mask| (0..n).filter(|i| mask >> i & 1 == 1).collect())
        .collect()
}

/// Score every (subgroup, code) pair, sort ascending, keep disjoint picks.
fn greedy_oracle(z: &[Vec<f64>], tables: &[(usize, Vec<Vec<Vec<f64>>>)]) -> Vec<(Vec<usize>, usize)> {
    let mut scored = Vec::new();
    for (m, codes) in tables {
        for members in subsets(z.len(), *m) {
            let joint: Vec<f64> = members.iter().flat_map(|&i| z[i].iter().copied()).collect();
            for (c, rows) in codes.iter().enumerate() {
                scored.push((sq(&joint, &rows.concat()) / *m as f64, *m, members.clone(), c));
            }
        }
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)).then(a.3.cmp(&b.3)));
    let mut taken = vec![false; z.len()];
    let mut picks = Vec::new();
    for (_, _, members, c) in scored {
        if members.iter().all(|&i| !taken[i]) {
            members.iter().for_each(|&i| taken[i] = true);
            picks.push((members, c));
        }
    }
    picks
}

fn rule_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = stream(104, "acceptance/rule");
    for inst in 0..300 {
        let n = rng.random_range(1..=4);
        let d = rng.random_range(1..=4);
        let k = rng.random_range(1..=8);
        let cb = Codebook3D::new(d, k, &[1, 2, 3, 4], &mut rng);
        let z = uniform_rows(n, d, &mut rng);
        let tables: Vec<(usize, Vec<Vec<Vec<f64>>>)> = (1..=4).map(|m| (m, (0..k).map(|c| cb.code_rows(m, c).unwrap()).collect())).collect();
        let got = assign_rule(&z, &cb).map_err(|e| e.to_string())?;
        let want = greedy_oracle(&z, &tables);
        let mut covered = vec![0; n];
        for g in got.partition.subgroups() {
            g.iter().for_each(|&i| covered[i] += 1);
        }
        if covered.iter().any(|&c| c != 1) {
            return Err(format!("instance {inst}: {} is not a disjoint cover", got.partition));
        }
        let mut want_groups: Vec<Vec<usize>> = want.iter().map(|(g, _)| g.clone()).collect();
        want_groups.sort();
        if got.partition.subgroups() != &want_groups[..] {
            return Err(format!("instance {inst}: {} vs oracle {want_groups:?}", got.partition));
        }
        for (g, c) in &want {
            for (row, &i) in g.iter().enumerate() {
                let expect = masd::runtime::CodeRef::Joint {
                    size: g.len(),
                    code: *c,
                    row,
                };
                if got.codes[i] != expect {
                    return Err(format!("instance {inst}: agent {i} got {} expected {expect}", got.codes[i]));
                }
            }
        }
    }
    within(Duration::from_secs(10), start)?;
    Ok("300/300 instances match the sort-then-filter oracle".into())
}

fn partition_validity() -> Outcome {
    let start = Instant::now();
    let mut rng = stream(105, "acceptance/partition");
    let mut graders: Vec<Grouper> = Vec::new();
    for (i, input) in [GrouperInput::State, GrouperInput::Obs].into_iter().enumerate() {
        for cap in [1, 3, N_MAX] {
            graders.push(Grouper::new(
                input,
                cap,
                1e-3,
                &mut stream(i as u64 * 10 + cap as u64, "acceptance/grouper-init"),
            ));
        }
    }
    for draw in 0..10_000 {
        let n = rng.random_range(1..=10);
        let g = &graders[draw % graders.len()];
        let ctx = GroupingContext {
            state: (0..STATE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect(),
            obs: uniform_rows(n, OBS_DIM, &mut rng),
        };
        let rollout = g.choose_groups(&ctx, Some(&mut rng)).map_err(|e| e.to_string())?;
        let p = rollout.partition();
        let mut seen = vec![0; n];
        for sub in p.subgroups() {
            if sub.is_empty() || sub.len() > g.max_size || sub.windows(2).any(|w| w[0] >= w[1]) {
                return Err(format!("draw {draw}: bad subgroup {sub:?} (cap {})", g.max_size));
            }
            sub.iter().for_each(|&i| seen[i] += 1);
        }
        if seen.iter().any(|&c| c != 1) || p.n_agents() != n {
            return Err(format!("draw {draw}: {p} does not cover {n} agents exactly once"));
        }
        if Partition::new(p.subgroups().to_vec(), n).is_err() {
            return Err(format!("draw {draw}: {p} rejected by the partition constructor"));
        }
    }
    within(Duration::from_secs(5), start)?;
    Ok("10000/10000 sampled partitions are disjoint covers".into())
}

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head);
            out.push(p);
        }
    }
    out
}

fn aggregator_invariance() -> Outcome {
    let mut rng = stream(106, "acceptance/aggregator");
    let mut worst: f64 = 0.0;
    let mut evaluated = 0;
    for set in 0..100 {
        let d = rng.random_range(1..=8);
        let heads = rng.random_range(1..=3);
        let width = heads * rng.random_range(1..=4);
        let d_top = rng.random_range(1..=6);
        let agg = Aggregator::new(d, width, d_top, heads).map_err(|e| e.to_string())?;
        let mut params = ParameterSet::new(Role::Aggregator);
        agg.init(&mut params, &mut rng);
        let size = 1 + set % 5;
        let members = uniform_rows(size, d, &mut rng);
        let reference = agg.aggregate_top(&params, &members).map_err(|e| e.to_string())?;
        for perm in permutations(&(0..size).collect::<Vec<_>>()) {
            let shuffled: Vec<Vec<f64>> = perm.iter().map(|&i| members[i].clone()).collect();
            let out = agg.aggregate_top(&params, &shuffled).map_err(|e| e.to_string())?;
            worst = out.iter().zip(&reference).fold(worst, |w, (a, b)| w.max((a - b).abs()));
            evaluated += 1;
        }
    }
    if worst > 1e-12 {
        return Err(format!("max deviation {worst:.2e}"));
    }
    Ok(format!("{evaluated} permutations over 100 sets, max deviation {worst:.1e}"))
}

fn expert_batches(horizon: usize) -> Result<Vec<SegmentBatch>, String> {
    let mut episodes = Vec::new();
    for id in ["g3", "g5"] {
        let cfg = task(id).map_err(|e| e.to_string())?;
        let (eps, _) = collect(&cfg, 150, CollectorPolicy::Expert, 7).map_err(|e| e.to_string())?;
        episodes.extend(eps);
    }
    segment(&episodes, horizon, false).map_err(|e| e.to_string())
}

fn untrained_calibration() -> Outcome {
    let batches = expert_batches(5)?;
    let mut worst: f64 = 0.0;
    for method in [Method::ThreeD, Method::Hier, Method::Single] {
        let cfg = DiscoveryConfig {
            method,
            seed: 7,
            ..DiscoveryConfig::default()
        };
        let model = SkillModel::new(cfg, OBS_DIM).map_err(|e| e.to_string())?;
        let (mut nll, mut expected) = (0.0, 0.0);
        for b in batches.iter().filter(|b| b.segments.iter().all(|s| s.valid.iter().all(|&v| v))).take(100) {
            let n = b.n_agents();
            let p = model.effective_partition(&Partition::new((0..n).map(|i| vec![i]).collect(), n).unwrap());
            nll += model.loss(b, &p).map_err(|e| e.to_string())?.nll;
            expected += (b.horizon() * n) as f64 * (N_ACTIONS as f64).ln();
        }
        let rel = (nll / expected - 1.0).abs();
        worst = worst.max(rel);
        if rel >= 0.1 {
            return Err(format!("{method}: NLL {nll:.2} vs H*n*ln6 total {expected:.2}"));
        }
    }
    Ok(format!("NLL within {:.2}% of H*n*ln 6 for 3d, hier and single", 100.0 * worst))
}

struct Skills {
    three_d: Discovery,
    hier: Discovery,
}

fn discovery_convergence(skills: &mut Option<Skills>) -> Outcome {
    let start = Instant::now();
    let batches = expert_batches(5)?;
    let mut notes = Vec::new();
    let mut failed = Vec::new();
    let mut trained = Vec::new();
    for method in [Method::ThreeD, Method::Hier] {
        let cfg = DiscoveryConfig {
            method,
            epochs: 200,
            seed: 7,
            ..DiscoveryConfig::default()
        };
        let mut d = Discovery::new(cfg, OBS_DIM).map_err(|e| e.to_string())?;
        let r = d.train(&batches, |_| {}).map_err(|e| e.to_string())?;
        let reduction = r.loss_reduction();
        notes.push(format!("{method}: loss -{:.1}%, accuracy {:.3}", 100.0 * reduction, r.last.accuracy));
        if reduction < 0.5 || r.last.accuracy < 0.9 {
            failed.push(method);
        }
        trained.push(d);
    }
    let hier = trained.pop().unwrap();
    let three_d = trained.pop().unwrap();
    *skills = Some(Skills { three_d, hier });
    within(Duration::from_secs(20 * 60), start)?;
    let summary = notes.join("; ");
    if failed.is_empty() {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn ensure_skills(skills: &mut Option<Skills>) -> Result<&Skills, String> {
    if skills.is_none() {
        discovery_convergence(skills)?;
    }
    Ok(skills.as_ref().unwrap())
}

fn planted_grouping() -> Outcome {
    let start = Instant::now();
    let target = Partition::new(vec![vec![0, 1], vec![2]], 3).unwrap();
    let mut hits = Vec::new();
    for seed in 0..10u64 {
        let mut r = stream(seed, "acceptance/planted-contexts");
        let contexts: Vec<GroupingContext> = (0..16)
            .map(|_| GroupingContext {
                state: (0..STATE_DIM).map(|_| r.random_range(-1.0..1.0)).collect(),
                obs: vec![vec![0.0; OBS_DIM]; 3],
            })
            .collect();
        let mut g = Grouper::new(GrouperInput::State, N_MAX, 1e-3, &mut stream(seed, "acceptance/planted-init"));
        let mut rng = stream(seed, "acceptance/planted-phase");
        let mut hit = None;
        for phase in 1..=200 {
            g.ppo_phase(
                &contexts,
                |_, p| Ok(if *p == target { 0.0 } else { 1.0 }),
                &grouper_ppo_config(),
                &mut rng,
            )
            .map_err(|e| e.to_string())?;
            if contexts.iter().all(|c| g.greedy_partition(c).is_ok_and(|p| p == target)) {
                hit = Some(phase);
                break;
            }
        }
        hits.push(hit);
    }
    within(Duration::from_secs(300), start)?;
    let ok = hits.iter().filter(|h| h.is_some()).count();
    let slowest = hits.iter().flatten().max().copied().unwrap_or(0);
    let msg = format!("{ok}/10 seeds recover {{0,1}}{{2}} (slowest at phase {slowest})");
    if ok >= 9 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn downstream(cfg: &masd::env::TaskConfig, skills: &Discovery, manner: Manner, seed: u64, stop_at: f64) -> Result<TrainOutcome, String> {
    let dc = DownstreamConfig {
        seed,
        stop_at_win: Some(stop_at),
        ..DownstreamConfig::default()
    };
    let mut agent = SkillAgent::new(skills.clone(), manner, dc.hidden, &dc.ppo, &mut stream(seed, "init")).map_err(|e| e.to_string())?;
    train_downstream(cfg, &mut agent, &dc, |_| {}).map_err(|e| e.to_string())
}

fn first_reach(o: &TrainOutcome, level: f64) -> Option<usize> {
    o.rows.iter().find(|r| r.win_rate >= level).map(|r| r.step)
}

fn skills_for(s: &Skills, manner: Manner) -> &Discovery {
    if manner == Manner::Hier {
        &s.hier
    } else {
        &s.three_d
    }
}

fn sparse_advantage(skills: &mut Option<Skills>) -> Outcome {
    let start = Instant::now();
    let s = ensure_skills(skills)?;
    let cfg = task("g5").map_err(|e| e.to_string())?.sparse();
    let mut notes = Vec::new();
    let mut ok = true;
    for manner in [Manner::Hier, Manner::Mixed, Manner::Rule] {
        let mut reached = Vec::new();
        for seed in 0..3 {
            let o = downstream(&cfg, skills_for(s, manner), manner, seed, 0.5)?;
            reached.push(first_reach(&o, 0.5));
        }
        let n = reached.iter().filter(|r| r.is_some()).count();
        ok &= n >= 2;
        let steps: Vec<String> = reached.iter().map(|r| r.map_or("-".into(), |s| s.to_string())).collect();
        notes.push(format!("{manner} {n}/3 (steps {})", steps.join("/")));
    }
    let mut flat_best = Vec::new();
    for seed in 0..3 {
        let dc = DownstreamConfig {
            seed,
            ..DownstreamConfig::default()
        };
        let mut agent = FlatAgent::new(dc.hidden, &dc.ppo, &mut stream(seed, "init"));
        let o = train_flat(&cfg, &mut agent, &dc, |_| {}).map_err(|e| e.to_string())?;
        flat_best.push(o.best_win_rate);
    }
    ok &= flat_best.iter().all(|&w| w < 0.1);
    notes.push(format!("flat best {:?}", flat_best.iter().map(|w| format!("{w:.3}")).collect::<Vec<_>>()));
    within(Duration::from_secs(2 * 3600), start)?;
    let msg = notes.join("; ");
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn transfer(skills: &mut Option<Skills>) -> Outcome {
    let start = Instant::now();
    let s = ensure_skills(skills)?;
    let cfg = task("g7").map_err(|e| e.to_string())?;
    let mut notes = Vec::new();
    for manner in [Manner::Rule, Manner::Mixed, Manner::ThreeD, Manner::Hier] {
        let mut n = 0;
        let mut steps = Vec::new();
        for seed in 0..3 {
            let o = downstream(&cfg, skills_for(s, manner), manner, seed, 0.4)?;
            let r = first_reach(&o, 0.4);
            n += usize::from(r.is_some());
            steps.push(r.map_or("-".into(), |s| s.to_string()));
        }
        notes.push(format!("{manner} {n}/3 (steps {})", steps.join("/")));
        if n >= 2 {
            within(Duration::from_secs(3600), start)?;
            return Ok(notes.join("; "));
        }
    }
    Err(notes.join("; "))
}

fn run_cli(dir: &Path, args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_masd"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("masd {args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out.stdout)
}

fn pipeline(dir: &Path) -> Result<Vec<Vec<u8>>, String> {
    let f = |n: &str| n.to_string();
    let mut artifacts = Vec::new();
    artifacts.push(run_cli(
        dir,
        &["collect", "--task", "g3", "--episodes", "20", "--seed", "12", "--out", &f("g3.jsonl")],
    )?);
    artifacts.push(run_cli(
        dir,
        &[
            "collect",
            "--task",
            "g5",
            "--episodes",
            "10",
            "--policy",
            "noisy:0.1",
            "--seed",
            "12",
            "--out",
            &f("g5.jsonl"),
        ],
    )?);
    let data = format!("{},{}", f("g3.jsonl"), f("g5.jsonl"));
    for method in ["3d", "hier"] {
        let ck = f(&format!("{method}.ckpt"));
        artifacts.push(run_cli(
            dir,
            &[
                "discover", "--method", method, "--data", &data, "--epochs", "3", "--seed", "12", "--out", &ck,
            ],
        )?);
        let pol = f(&format!("{method}.policy"));
        artifacts.push(run_cli(
            dir,
            &[
                "train",
                "--env",
                "g5",
                "--skills",
                &ck,
                "--assign",
                method,
                "--steps",
                "3000",
                "--rollout-steps",
                "1000",
                "--eval-every",
                "1000",
                "--eval-episodes",
                "2",
                "--seed",
                "12",
                "--out",
                &pol,
            ],
        )?);
        artifacts.push(run_cli(
            dir,
            &[
                "eval",
                "--env",
                "g5",
                "--policy",
                &pol,
                "--episodes",
                "3",
                "--seed",
                "12",
                "--dump-traj",
                &f(&format!("{method}.traj")),
            ],
        )?);
    }
    let mut names: Vec<_> = std::fs::read_dir(dir).map_err(|e| e.to_string())?.map(|e| e.unwrap().path()).collect();
    names.sort();
    for p in names {
        artifacts.push(std::fs::read(p).map_err(|e| e.to_string())?);
    }
    Ok(artifacts)
}

fn freeze_and_reproducibility(skills: &mut Option<Skills>) -> Outcome {
    let s = ensure_skills(skills)?;
    let cfg = task("g5").map_err(|e| e.to_string())?;
    for manner in [Manner::ThreeD, Manner::Hier, Manner::Rule] {
        let sk = skills_for(s, manner);
        let before = skill_fingerprint(sk);
        let dc = DownstreamConfig {
            steps: 20_000,
            seed: 3,
            ..DownstreamConfig::default()
        };
        let mut agent = SkillAgent::new(sk.clone(), manner, dc.hidden, &dc.ppo, &mut stream(3, "init")).map_err(|e| e.to_string())?;
        let actor_before = agent.ac.actor.clone();
        train_downstream(&cfg, &mut agent, &dc, |_| {}).map_err(|e| e.to_string())?;
        if skill_fingerprint(&agent.skills) != before {
            return Err(format!("{manner}: skill tensors changed during downstream training"));
        }
        if agent.ac.actor == actor_before {
            return Err(format!("{manner}: policy did not train"));
        }
        let reloaded = SkillAgent::from_checkpoint(&agent.to_checkpoint()).map_err(|e| e.to_string())?;
        if skill_fingerprint(&reloaded.skills) != before {
            return Err(format!("{manner}: saved policy carries different skills"));
        }
    }
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (ra, rb) = (pipeline(a.path())?, pipeline(b.path())?);
    if ra.len() != rb.len() || ra.iter().zip(&rb).any(|(x, y)| x != y) {
        return Err("CLI outputs differ between identical runs".into());
    }
    Ok(format!(
        "skills byte-identical after training (3d, hier, rule); {} CLI outputs byte-identical across reruns",
        ra.len()
    ))
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let run = |n: usize| selected.is_empty() || selected.contains(&n);
    let mut skills = None;
    let names = [
        "quantization oracle",
        "gradient correctness",
        "gradient routing",
        "greedy assignment oracle",
        "partition validity",
        "aggregator permutation invariance",
        "untrained loss calibration",
        "discovery convergence",
        "planted grouping recovery",
        "sparse-reward advantage",
        "transfer to unseen task",
        "freeze and reproducibility",
    ];
    let mut failures = 0;
    let mut stderr = std::io::stderr();
    for (i, name) in names.iter().enumerate() {
        let n = i + 1;
        if !run(n) {
            continue;
        }
        let start = Instant::now();
        let result = match n {
            1 => quantization_oracle(),
            2 => gradient_correctness(),
            3 => gradient_routing(),
            4 => rule_oracle_equivalence(),
            5 => partition_validity(),
            6 => aggregator_invariance(),
            7 => untrained_calibration(),
            8 => discovery_convergence(&mut skills),
            9 => planted_grouping(),
            10 => sparse_advantage(&mut skills),
            11 => transfer(&mut skills),
            _ => freeze_and_reproducibility(&mut skills),
        };
        let secs = start.elapsed().as_secs_f64();
        let line = match &result {
            Ok(msg) => format!("criterion {n:>2} PASS  {name}: {msg} [{secs:.1}s]"),
            Err(msg) => {
                failures += 1;
                format!("criterion {n:>2} FAIL  {name}: {msg} [{secs:.1}s]")
            }
        };
        println!("{line}");
        let _ = stderr.flush();
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
