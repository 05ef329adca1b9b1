use rand::seq::SliceRandom;
use rand::Rng as _;

use super::*;
use crate::env::task;
use crate::grouper::Partition;
use crate::mappo::PpoConfig;
use crate::nn::{ParameterSet, Role, Tensor};
use crate::rng::stream;
use crate::vq::{Aggregator, Codebook3D, DiscoveryConfig, HierCodebooks, BTM_NAME, TOP_NAME};

fn random_rows(n: usize, d: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn codebook(d: usize, k: usize, sizes: &[usize], rng: &mut Rng) -> Codebook3D {
    let mut tables = ParameterSet::new(Role::Codebook);
    for &m in sizes {
        let data = (0..k * m * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        tables.insert(&format!("E3d/m{m}"), Tensor::new(vec![k, m, d], data).unwrap());
    }
    Codebook3D::from_tables(tables).unwrap()
}

fn random_partition(n: usize, max: usize, rng: &mut Rng) -> Partition {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut groups = Vec::new();
    let mut rest = &idx[..];
    while !rest.is_empty() {
        let m = rng.random_range(1..=rest.len().min(max));
        groups.push(rest[..m].to_vec());
        rest = &rest[m..];
    }
    Partition::new(groups, n).unwrap()
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Exhaustive scan over the `k` codes of `E_m`, strict improvement only.
fn scan(joint: &[f64], cb: &Codebook3D, m: usize) -> usize {
    let t = cb.table(m).unwrap();
    let mut best = (usize::MAX, f64::INFINITY);
    for c in 0..cb.k {
        let code = &t.data()[c * m * cb.d..(c + 1) * m * cb.d];
        let dist = sq(joint, code);
        if dist < best.1 {
            best = (c, dist);
        }
    }
    best.0
}

#[test]
fn combinations_are_lexicographic() {
    assert_eq!(
        combinations(4, 2),
        vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3], vec![2, 3]]
    );
    assert_eq!(combinations(5, 5), vec![vec![0, 1, 2, 3, 4]]);
    assert!(combinations(2, 3).is_empty());
    assert_eq!(combinations(10, 5).len(), 252);
}

#[test]
fn three_d_matches_exhaustive_scan() {
    let mut rng = stream(0, "3d");
    for _ in 0..200 {
        let n = rng.random_range(1..=5);
        let d = rng.random_range(1..=4);
        let cb = codebook(d, rng.random_range(1..=8), &[1, 2, 3, 4, 5], &mut rng);
        let z = random_rows(n, d, &mut rng);
        let p = random_partition(n, 5, &mut rng);
        let a = assign_3d_with(&z, &p, &cb).unwrap();
        assert_eq!(a.partition, p);
        assert_eq!(a.fallbacks, 0);
        for g in p.subgroups() {
            let joint: Vec<f64> = g.iter().flat_map(|&i| z[i].clone()).collect();
            let c = scan(&joint, &cb, g.len());
            for (j, &i) in g.iter().enumerate() {
                assert_eq!(
                    a.codes[i],
                    CodeRef::Joint {
                        size: g.len(),
                        code: c,
                        row: j
                    }
                );
                assert_eq!(a.cond[i], cb.code_rows(g.len(), c).unwrap()[j]);
            }
        }
    }
}

#[test]
fn three_d_edge_cases() {
    let mut rng = stream(1, "3d");
    let cb = codebook(3, 6, &[1, 2, 3], &mut rng);
    let z = random_rows(1, 3, &mut rng);
    let a = assign_3d_with(&z, &Partition::whole(1), &cb).unwrap();
    assert_eq!(
        a.codes[0],
        CodeRef::Joint {
            size: 1,
            code: cb.nearest_code(&z[0], 1).unwrap().0,
            row: 0
        }
    );

    let exact = cb.code_rows(3, 4).unwrap();
    let a = assign_3d_with(&exact, &Partition::whole(3), &cb).unwrap();
    assert_eq!(a.cond, exact);
    assert_eq!(cb.nearest_code(&exact.concat(), 3).unwrap(), (4, 0.0));

    // no size-2 table: the pair falls back to single-agent codes
    let cb = codebook(2, 4, &[1, 3], &mut rng);
    let z = random_rows(3, 2, &mut rng);
    let a = assign_3d_with(&z, &Partition::new(vec![vec![0, 2], vec![1]], 3).unwrap(), &cb).unwrap();
    assert_eq!(a.fallbacks, 1);
    assert_eq!(a.partition, Partition::singletons(3));
    assert!(a.codes.iter().all(|c| matches!(c, CodeRef::Joint { size: 1, .. })));
}

fn hier_parts(d: usize, k: usize, d_top: usize, k_top: usize, rng: &mut Rng) -> (Aggregator, ParameterSet, HierCodebooks) {
    let agg = Aggregator::new(d, 4, d_top, 2).unwrap();
    let mut params = ParameterSet::new(Role::Aggregator);
    agg.init(&mut params, rng);
    (agg, params, HierCodebooks::new(d, k, Some((d_top, k_top)), rng))
}

#[test]
fn hier_matches_exhaustive_scans() {
    let mut rng = stream(2, "hier");
    for _ in 0..200 {
        let n = rng.random_range(1..=5);
        let (agg, params, cb) = hier_parts(3, rng.random_range(1..=8), 2, rng.random_range(1..=6), &mut rng);
        let z = random_rows(n, 3, &mut rng);
        let p = random_partition(n, n, &mut rng);
        let a = assign_hier_with(&z, &p, &agg, &params, &cb).unwrap();
        let btm = cb.tables.get(BTM_NAME).unwrap();
        let top = cb.tables.get(TOP_NAME).unwrap();
        for g in p.subgroups() {
            let members: Vec<Vec<f64>> = g.iter().map(|&i| z[i].clone()).collect();
            let zt = agg.aggregate_top(&params, &members).unwrap();
            let t = (0..top.rows()).fold(0, |b, c| if sq(&zt, top.row(c)) < sq(&zt, top.row(b)) { c } else { b });
            for &i in g {
                let b = (0..btm.rows()).fold(0, |b, c| if sq(&z[i], btm.row(c)) < sq(&z[i], btm.row(b)) { c } else { b });
                assert_eq!(a.codes[i], CodeRef::Hier { btm: b, top: Some(t) });
                assert_eq!(&a.cond[i][..3], btm.row(b));
                assert_eq!(&a.cond[i][3..], top.row(t));
            }
        }
    }
}

#[test]
fn hier_top_code_ignores_member_order_and_single_top_reduces_to_bottom() {
    let mut rng = stream(3, "hier");
    let (agg, params, cb) = hier_parts(3, 5, 2, 4, &mut rng);
    let z = random_rows(4, 3, &mut rng);
    let a = assign_hier_with(&z, &Partition::whole(4), &agg, &params, &cb).unwrap();
    let mut perm = z.clone();
    perm.swap(0, 3);
    perm.swap(1, 2);
    let b = assign_hier_with(&perm, &Partition::whole(4), &agg, &params, &cb).unwrap();
    let tops = |x: &Assignment| {
        x.codes
            .iter()
            .map(|c| if let CodeRef::Hier { top, .. } = c { *top } else { None })
            .collect::<Vec<_>>()
    };
    assert_eq!(tops(&a), tops(&b));

    let (agg, params, cb) = hier_parts(3, 5, 2, 1, &mut rng);
    let a = assign_hier_with(&z, &Partition::singletons(4), &agg, &params, &cb).unwrap();
    let pool = RowPool::from_table(cb.btm());
    let m = assign_mixed(&z, &pool).unwrap();
    for i in 0..4 {
        assert_eq!(a.cond[i][..3], m.cond[i][..]);
    }
}

#[test]
fn mixed_matches_linear_scan() {
    let mut rng = stream(4, "mixed");
    for _ in 0..500 {
        let d = rng.random_range(1..=4);
        let cb = codebook(d, rng.random_range(1..=6), &[1, 2, 3], &mut rng);
        let pool = RowPool::from_3d(&cb).unwrap();
        let z = random_rows(rng.random_range(1..=5), d, &mut rng);
        let a = assign_mixed(&z, &pool).unwrap();
        for (i, zi) in z.iter().enumerate() {
            let mut best: Option<(CodeRef, Vec<f64>, f64)> = None;
            for m in [1, 2, 3] {
                for c in 0..cb.k {
                    for (r, row) in cb.code_rows(m, c).unwrap().into_iter().enumerate() {
                        let dist = sq(zi, &row);
                        if best.as_ref().is_none_or(|b| dist < b.2) {
                            best = Some((CodeRef::Joint { size: m, code: c, row: r }, row, dist));
                        }
                    }
                }
            }
            let (code, row, _) = best.unwrap();
            assert_eq!(a.codes[i], code);
            assert_eq!(a.cond[i], row);
        }
    }
}

#[test]
fn mixed_dedups_and_agrees_with_singleton_3d() {
    let mut rng = stream(5, "mixed");
    let mut cb = codebook(2, 3, &[1, 2], &mut rng);
    // make a size-2 row an exact copy of a size-1 code
    let copy = cb.code_rows(1, 2).unwrap().remove(0);
    cb.tables.get_mut("E3d/m2").unwrap().data_mut()[2..4].copy_from_slice(&copy);
    let pool = RowPool::from_3d(&cb).unwrap();
    assert_eq!(pool.len(), 3 + 3 * 2 - 1);
    let a = assign_mixed(std::slice::from_ref(&copy), &pool).unwrap();
    assert_eq!(a.codes[0], CodeRef::Joint { size: 1, code: 2, row: 0 });

    let only1 = codebook(2, 5, &[1], &mut rng);
    let pool = RowPool::from_3d(&only1).unwrap();
    for _ in 0..50 {
        let z = random_rows(4, 2, &mut rng);
        let m = assign_mixed(&z, &pool).unwrap();
        let t = assign_3d_with(&z, &Partition::singletons(4), &only1).unwrap();
        let r = assign_rule(&z, &only1).unwrap();
        assert_eq!(m.cond, t.cond);
        assert_eq!(m.cond, r.cond);
    }
}

/// Sorts every candidate once and filters greedily.
fn rule_oracle(z: &[Vec<f64>], cb: &Codebook3D) -> Vec<(Vec<usize>, usize)> {
    let mut all = Vec::new();
    for m in cb.sizes() {
        if m > z.len() {
            continue;
        }
        for members in combinations(z.len(), m) {
            let joint: Vec<f64> = members.iter().flat_map(|&i| z[i].clone()).collect();
            for c in 0..cb.k {
                let code: Vec<f64> = cb.code_rows(m, c).unwrap().concat();
                all.push((sq(&joint, &code) / m as f64, m, members.clone(), c));
            }
        }
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)).then(a.3.cmp(&b.3)));
    let mut used = vec![false; z.len()];
    let mut out = Vec::new();
    for (_, _, members, c) in all {
        if members.iter().all(|&i| !used[i]) {
            members.iter().for_each(|&i| used[i] = true);
            out.push((members, c));
        }
    }
    out
}

#[test]
fn rule_matches_sort_then_filter_oracle() {
    let mut rng = stream(6, "rule");
    for _ in 0..300 {
        let n = rng.random_range(1..=4);
        let d = rng.random_range(1..=3);
        let cb = codebook(d, rng.random_range(1..=6), &[1, 2, 3, 4], &mut rng);
        let z = random_rows(n, d, &mut rng);
        let a = assign_rule(&z, &cb).unwrap();
        let oracle = rule_oracle(&z, &cb);
        let mut groups: Vec<Vec<usize>> = oracle.iter().map(|(g, _)| g.clone()).collect();
        groups.sort();
        assert_eq!(a.partition.subgroups(), &groups[..]);
        for (g, c) in oracle {
            for (j, &i) in g.iter().enumerate() {
                assert_eq!(
                    a.codes[i],
                    CodeRef::Joint {
                        size: g.len(),
                        code: c,
                        row: j
                    }
                );
            }
        }
    }
}

#[test]
fn rule_hand_constructed_instance() {
    let mut tables = ParameterSet::new(Role::Codebook);
    tables.insert("E3d/m1", Tensor::new(vec![2, 1, 1], vec![5.5, -0.5]).unwrap());
    tables.insert("E3d/m2", Tensor::new(vec![2, 2, 1], vec![0.0, 0.2f64.sqrt(), 50.0, 50.0]).unwrap());
    let cb = Codebook3D::from_tables(tables).unwrap();
    let z = vec![vec![0.0], vec![0.0], vec![5.0]];
    let cands = rule_candidates(&z, &cb).unwrap();
    let pair = cands.iter().find(|c| c.members == vec![0, 1]).unwrap();
    assert!((pair.key - 0.1).abs() < 1e-12);
    assert!(cands.iter().filter(|c| c.members.len() == 1).all(|c| c.key >= 0.2));
    let a = assign_rule(&z, &cb).unwrap();
    assert_eq!(a.partition.to_string(), "{0,1}{2}");
    assert_eq!(a.codes[2], CodeRef::Joint { size: 1, code: 0, row: 0 });

    let one = assign_rule(&[vec![0.1]], &cb).unwrap();
    assert_eq!(one.codes[0], CodeRef::Joint { size: 1, code: 1, row: 0 });

    let mut tables = ParameterSet::new(Role::Codebook);
    tables.insert("E3d/m2", Tensor::new(vec![1, 2, 1], vec![0.0, 0.0]).unwrap());
    let no_single = Codebook3D::from_tables(tables).unwrap();
    assert!(matches!(assign_rule(&z, &no_single), Err(Error::Infeasible(_))));
}

fn small_skills(method: Method) -> Discovery {
    let cfg = DiscoveryConfig {
        method,
        horizon: 5,
        d: 3,
        k: 4,
        d_top: 2,
        k_top: 3,
        heads: 2,
        attn_width: 4,
        hidden: 8,
        sizes: vec![1, 2, 3],
        ..DiscoveryConfig::default()
    };
    Discovery::new(cfg, OBS_DIM).unwrap()
}

fn agent(method: Method, manner: Manner) -> Result<SkillAgent> {
    SkillAgent::new(small_skills(method), manner, 16, &PpoConfig::default(), &mut stream(0, "init"))
}

#[test]
fn manner_compatibility() {
    for method in [Method::ThreeD, Method::Hier, Method::Single] {
        for manner in Manner::ALL {
            let r = agent(method, manner);
            assert_eq!(r.is_ok(), compatible(method, manner), "{method} {manner}");
            if let Err(e) = r {
                assert!(matches!(e, Error::MissingTensors(_)), "{e}");
            }
        }
    }
    let err = agent(Method::ThreeD, Manner::Hier).unwrap_err().to_string();
    assert!(err.contains(TOP_NAME) && err.contains("agg"), "{err}");
    for m in Manner::ALL {
        assert_eq!(m.to_string().parse::<Manner>().unwrap(), m);
    }
    assert!("flat".parse::<Manner>().is_err());
}

#[test]
fn truncated_skill_sums_realized_rewards() {
    let mut cfg = task("g3").unwrap();
    cfg.max_steps = 3;
    let a = agent(Method::ThreeD, Manner::Rule).unwrap();
    let ep = run_skill_episode(&cfg, 1, &a, RolloutMode::GREEDY, &mut stream(0, "x")).unwrap();
    assert_eq!(ep.transitions.len(), 1);
    let tr = &ep.transitions[0];
    assert!(tr.done);
    assert_eq!(tr.steps, 3);
    assert_eq!(tr.reward, ep.ret);
    assert_eq!(high_level_horizon(60, 5), 12);
    assert_eq!(high_level_horizon(3, 5), 1);
}

#[test]
fn skill_rewards_telescope_and_greedy_rollouts_repeat() {
    let cfg = task("g3").unwrap();
    for (method, manner) in [
        (Method::ThreeD, Manner::ThreeD),
        (Method::Hier, Manner::Hier),
        (Method::ThreeD, Manner::Mixed),
        (Method::Single, Manner::Mixed),
    ] {
        let a = agent(method, manner).unwrap();
        let mode = RolloutMode {
            sample_actor: true,
            sample_decoder: true,
            trace: true,
        };
        let ep = run_skill_episode(&cfg, 4, &a, mode, &mut stream(1, "x")).unwrap();
        let total: f64 = ep.transitions.iter().map(|t| t.reward).sum();
        assert_eq!(total, ep.trace.iter().map(|s| s.reward).sum::<f64>());
        assert!((total - ep.ret).abs() < 1e-12);
        assert_eq!(ep.transitions.iter().map(|t| t.steps).sum::<usize>(), ep.steps);
        assert!(ep.transitions.len() <= high_level_horizon(cfg.max_steps, 5));
        for t in &ep.transitions {
            assert_eq!(t.codes.len(), cfg.n_agents);
            assert_eq!(t.partition.n_agents(), cfg.n_agents);
        }
        let g1 = run_skill_episode(&cfg, 4, &a, RolloutMode::GREEDY, &mut stream(2, "x")).unwrap();
        let g2 = run_skill_episode(&cfg, 4, &a, RolloutMode::GREEDY, &mut stream(3, "x")).unwrap();
        assert_eq!(g1, g2);
    }
}

#[test]
fn policy_checkpoints_round_trip() {
    let a = agent(Method::Hier, Manner::Hier).unwrap();
    let back = SkillAgent::from_checkpoint(&Checkpoint::from_text(&a.to_checkpoint().to_text()).unwrap()).unwrap();
    assert_eq!(back.ac.actor, a.ac.actor);
    assert_eq!(back.manner, Manner::Hier);
    let f = FlatAgent::new(16, &PpoConfig::default(), &mut stream(0, "f"));
    match PolicyAgent::from_checkpoint(&f.to_checkpoint()).unwrap() {
        PolicyAgent::Flat(g) => assert_eq!(g.ac.critic, f.ac.critic),
        PolicyAgent::Skills(_) => panic!("flat checkpoint loaded as skills"),
    }
    assert!(PolicyAgent::from_checkpoint(&small_skills(Method::ThreeD).to_checkpoint()).is_err());
}

#[test]
fn downstream_training_keeps_skills_frozen() {
    let cfg = task("g3").unwrap().sparse();
    let dc = DownstreamConfig {
        steps: 600,
        rollout_steps: 200,
        eval_every: 300,
        eval_episodes: 2,
        hidden: 16,
        ..DownstreamConfig::default()
    };
    let mut a = agent(Method::ThreeD, Manner::ThreeD).unwrap();
    let before = skill_fingerprint(&a.skills);
    let actor_before = a.ac.actor.clone();
    let out = train_downstream(&cfg, &mut a, &dc, |_| {}).unwrap();
    assert_eq!(skill_fingerprint(&a.skills), before);
    assert_ne!(a.ac.actor, actor_before);
    assert!(out.rows.windows(2).all(|w| w[0].step < w[1].step));
    assert!(out.rows.iter().all(|r| (0.0..=1.0).contains(&r.win_rate)));
    assert_eq!(out.rows[0].step, 0);
    assert!(out.steps >= 600);
    let csv = out.metrics_csv();
    assert!(csv.starts_with(METRICS_HEADER));
    assert_eq!(csv.lines().count(), out.rows.len() + 1);

    let mut b = agent(Method::ThreeD, Manner::ThreeD).unwrap();
    let again = train_downstream(&cfg, &mut b, &dc, |_| {}).unwrap();
    assert_eq!(again, out);
    assert_eq!(b.ac.actor, a.ac.actor);

    let mut f = FlatAgent::new(16, &PpoConfig::default(), &mut stream(0, "f"));
    let flat = train_flat(&cfg, &mut f, &dc, |_| {}).unwrap();
    assert!(flat.rows.len() >= 2);
}

#[test]
fn wilson_interval_brackets_the_rate() {
    let (lo, hi) = wilson_interval(95, 100);
    assert!(lo < 0.95 && hi > 0.95 && lo > 0.88 && hi < 0.99);
    assert_eq!(wilson_interval(0, 0), (0.0, 1.0));
    let (lo, hi) = wilson_interval(0, 10);
    assert_eq!(lo, 0.0);
    assert!(hi > 0.2 && hi < 0.35);
}
