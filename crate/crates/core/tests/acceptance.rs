//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use layerfed::autodiff::Tape;
use layerfed::data::{partition_iid, synth_dataset, Dataset, SynthSpec};
use layerfed::encoder::{EncoderConfig, KeptSet, LayeredEncoder};
use layerfed::experiment::eval::linear_probe;
use layerfed::experiment::{
    cmd_pretrain, initial_encoder, phase_checkpoint_name, DataSource, EvalConfig, ExperimentConfig, FINAL_CHECKPOINT,
    METRICS_FILE,
};
use layerfed::federation::{client_train, plan_dropout, sample_batch, FedConfig, RoundPlan, Simulation, TrainingMode};
use layerfed::resources::{analytic_sample, EqualLayerModel, ResourceSample};
use layerfed::ssl::{self, AugmentConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fed(num_clients: usize, per_round: usize, rounds_per_layer: usize, batch_size: usize) -> FedConfig {
    FedConfig {
        num_clients,
        clients_per_round: per_round,
        rounds_per_layer,
        batch_size,
        local_steps: 1,
        client_lr: 0.05,
        server_lr: 1.0,
        budget: 0,
        drop_rate: 0.0,
        seed: 1,
        temperature: 0.5,
    }
}

fn desk_data(n: usize, seed: u64) -> Dataset {
    synth_dataset(&SynthSpec::new(4, n, 32, 32, seed)).unwrap()
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut instances = 0;
    for op in common::OPS {
        for seed in 0..20 {
            common::check_op(op, seed)?;
            instances += 1;
        }
    }
    for seed in 0..20 {
        common::check_encoder(seed)?;
        instances += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!("{} ops + encoder, {instances} instances, {secs:.1}s", common::OPS.len()))
}

fn frozen_layers() -> Outcome {
    let config = EncoderConfig::desk();
    let cfg = FedConfig { drop_rate: 0.5, client_lr: 0.1, ..fed(8, 2, 8, 8) };
    let data = desk_data(64, 3);
    let part = partition_iid(data.len(), cfg.num_clients, cfg.seed).unwrap();
    let aug = AugmentConfig::default();
    let sim = Simulation::new(&cfg, &aug, TrainingMode::LayerWiseDropout, &data, &part, config.num_blocks, 1).unwrap();
    let mut enc = LayeredEncoder::init(config.clone(), 4).unwrap();
    let mut checked = 0usize;
    for round in 0..50 {
        let plan = sim.plan(round, config.num_blocks).unwrap();
        let expected = plan.trainable_ids();
        for (slot, &client) in plan.clients.iter().enumerate() {
            let u = client_train(&enc, &plan, slot, part.shard(client), &data, &cfg, &aug).unwrap();
            let keys: Vec<_> = u.deltas.keys().copied().collect();
            ensure(keys == expected, || format!("round {round} client {client} uploaded {keys:?}"))?;
        }
        let before = enc.clone();
        sim.run_round(&mut enc, round).unwrap();
        for (x, y) in before.params().zip(enc.params()) {
            if !expected.contains(&x.id) {
                ensure(x.value.bit_eq(&y.value), || format!("round {round}: frozen {} changed", x.id))?;
                checked += 1;
            }
        }
    }
    Ok(format!("50 rounds, {checked} frozen tensors bit-identical, uploads equal trainable set"))
}

fn fedavg_oracle() -> Outcome {
    let config = EncoderConfig::desk();
    let cfg = fed(4, 4, 2, 8);
    let data = desk_data(64, 5);
    let part = partition_iid(data.len(), 4, 0).unwrap();
    let aug = AugmentConfig::default();
    let mut worst = 0.0f32;
    for mode in [TrainingMode::LayerWise, TrainingMode::EndToEnd] {
        let sim = Simulation::new(&cfg, &aug, mode, &data, &part, config.num_blocks, 1).unwrap();
        let round = 5;
        let plan = sim.plan(round, config.num_blocks).unwrap();
        let start = LayeredEncoder::init(config.clone(), 6).unwrap();
        let mut federated = start.clone();
        sim.run_round(&mut federated, round).unwrap();

        // one centralized SGD step on the mean loss over the same batches
        let mut oracle = start.clone();
        oracle.set_trainable_layers(&plan.trainable, Some(plan.head)).unwrap();
        let mut tape = Tape::new();
        let mut total = None;
        for (slot, &client) in plan.clients.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(plan.client_seeds[slot]);
            let (indices, _) = sample_batch(part.shard(client), cfg.batch_size, &mut rng);
            let views = ssl::make_views(&data.gather(&indices), &aug, &mut rng).unwrap();
            let rep = oracle.forward_on(&mut tape, &views.into_stacked(), &plan.kept, plan.phase).unwrap();
            let z = oracle.project_on(&mut tape, plan.head, &rep).unwrap();
            let loss = ssl::nt_xent_stacked(&mut tape, &z, cfg.temperature).unwrap();
            total = Some(match total {
                None => loss,
                Some(acc) => tape.add(&acc, &loss).unwrap(),
            });
        }
        let mean = tape.scale(&total.unwrap(), 1.0 / plan.clients.len() as f32).unwrap();
        for (id, g) in tape.backward(&mean).unwrap() {
            let p = oracle.param_mut(id).unwrap();
            p.value = p.value.zip_map(&g, |w, g| w - cfg.client_lr * g).unwrap();
        }
        for (x, y) in federated.params().zip(oracle.params()) {
            let diff = x.value.max_abs_diff(&y.value);
            worst = worst.max(diff);
            ensure(diff <= 1e-5, || format!("{mode}: {} differs by {diff:e}", x.id))?;
        }
    }
    Ok(format!("max elementwise difference {worst:.2e}"))
}

fn dropout_laws() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..10_000u32 {
        let num_blocks = 2 + (i as usize % 14);
        let phase = (i as usize / 14) % (num_blocks + 1);
        let budget = 2 + (i as usize / 7) % (num_blocks);
        let kept = plan_dropout(phase, budget, 0.0, &mut rng).map_err(|e| e.to_string())?;
        ensure(kept.contains(0) && kept.contains(phase) && kept.last() == phase, || format!("plan {i}: {kept}"))?;
        if phase + 1 > budget {
            ensure(kept.len() == budget, || format!("plan {i}: |{kept}| != {budget}"))?;
        } else {
            ensure(kept == KeptSet::prefix(phase), || format!("plan {i}: dropped under budget"))?;
        }
    }

    // phase 6, budget 4: three of the five frozen blocks go, C(5,3) = 10 sets
    let trials = 10_000u64;
    let mut counts: BTreeMap<Vec<usize>, u64> = BTreeMap::new();
    for _ in 0..trials {
        *counts.entry(plan_dropout(6, 4, 0.0, &mut rng).unwrap().layers().to_vec()).or_default() += 1;
    }
    ensure(counts.len() == 10, || format!("{} distinct drop sets", counts.len()))?;
    let expected = trials as f64 / 10.0;
    let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(9.0).unwrap().cdf(chi2);
    ensure(p > 0.01, || format!("chi2 {chi2:.2}, p {p:.4}"))?;

    // five layers (stem + 4 blocks), budget 3; the fourth and fifth
    // 1-based phases are phases 3 and 4 here
    let seen = |phase: usize, rng: &mut ChaCha8Rng| -> BTreeSet<Vec<usize>> {
        (0..200).map(|_| plan_dropout(phase, 3, 0.0, rng).unwrap().layers().to_vec()).collect()
    };
    let want3: BTreeSet<Vec<usize>> = [vec![0, 1, 3], vec![0, 2, 3]].into();
    let want4: BTreeSet<Vec<usize>> = [vec![0, 1, 4], vec![0, 2, 4], vec![0, 3, 4]].into();
    ensure(seen(3, &mut rng) == want3, || "fourth phase enumeration".into())?;
    ensure(seen(4, &mut rng) == want4, || "fifth phase enumeration".into())?;
    Ok(format!("10^4 plans lawful, chi2 p {p:.3}, candidates {{1,2}} and {{1,2,3}}"))
}

fn resource_fractions() -> Outcome {
    let start = Instant::now();
    let model = EqualLayerModel { layers: 12 };
    let max = |fs: &[layerfed::resources::ResourceFractions], f: fn(&layerfed::resources::ResourceFractions) -> f64| {
        fs.iter().map(f).fold(f64::NEG_INFINITY, f64::max)
    };
    let plain = model.schedule(0);
    let dropped = model.schedule(6);
    let comm = max(&plain, |f| f.comm_frac);
    let comm_drop = max(&dropped, |f| f.comm_frac);
    let compute = max(&plain, |f| f.compute_frac);
    let memory = plain.iter().map(|f| f.memory_frac).fold(f64::INFINITY, f64::min);
    let secs = start.elapsed().as_secs_f64();
    ensure((comm - 13.0 / 24.0).abs() < 1e-12 && (comm - 0.54).abs() <= 0.005, || format!("comm {comm}"))?;
    ensure((comm_drop - 0.29).abs() <= 0.03, || format!("dropout comm {comm_drop}"))?;
    ensure((compute - 0.39).abs() <= 0.03, || format!("compute {compute}"))?;
    ensure((0.05..=0.12).contains(&memory), || format!("memory {memory}"))?;
    ensure(secs < 1.0, || format!("analytic took {secs}s"))?;

    let config = EncoderConfig::desk();
    let cfg = fed(1, 1, 1, 8);
    let data = desk_data(16, 7);
    let shard: Vec<usize> = (0..data.len()).collect();
    let global = LayeredEncoder::init(config.clone(), 8).unwrap();
    let mut plans: Vec<RoundPlan> =
        (0..=config.num_blocks).map(|p| RoundPlan::layerwise(0, p, KeptSet::prefix(p))).collect();
    plans.push(RoundPlan::layerwise(0, 5, KeptSet::new(vec![0, 2, 5]).unwrap()));
    plans.push(RoundPlan::end_to_end(0, config.num_blocks));
    for mut plan in plans {
        plan.clients = vec![0];
        plan.client_seeds = vec![1];
        let m = client_train(&global, &plan, 0, &shard, &data, &cfg, &AugmentConfig::default()).unwrap().resources;
        let a = analytic_sample(&plan, &config, cfg.work());
        ensure(
            (m.bytes_down, m.bytes_up, m.flops_forward, m.flops_backward)
                == (a.bytes_down, a.bytes_up, a.flops_forward, a.flops_backward),
            || format!("kept {}: measured {m:?} analytic {a:?}", plan.kept),
        )?;
    }
    Ok(format!(
        "comm {comm:.4}, dropout comm {comm_drop:.4}, compute {compute:.4}, min memory {memory:.4}; measured = analytic"
    ))
}

fn final_phase_resources(num_blocks: usize, budget: usize) -> ResourceSample {
    let config = EncoderConfig { num_blocks, ..EncoderConfig::desk() };
    let cfg = FedConfig { budget, ..fed(1, 1, 1, 8) };
    let data = desk_data(16, 9);
    let part = partition_iid(data.len(), 1, 0).unwrap();
    let aug = AugmentConfig::default();
    let mode = if budget > 0 { TrainingMode::LayerWiseDropout } else { TrainingMode::LayerWise };
    let sim = Simulation::new(&cfg, &aug, mode, &data, &part, num_blocks, 1).unwrap();
    let plan = sim.plan(num_blocks, num_blocks).unwrap();
    let enc = LayeredEncoder::init(config, 1).unwrap();
    client_train(&enc, &plan, 0, part.shard(0), &data, &cfg, &aug).unwrap().resources
}

fn budget_equivalence() -> Outcome {
    // twelve layers (stem + 11 blocks) with budget 6 against six layers
    // (stem + 5 blocks) without dropout
    let deep = final_phase_resources(11, 6);
    let shallow = final_phase_resources(5, 0);
    let rel = |a: u64, b: u64| (a as f64 - b as f64).abs() / b as f64;
    // counting only blocks instead: 12 blocks with budget 6 keep one layer
    // fewer than a 6-block model's final phase
    let (d, s) = (final_phase_resources(12, 6), final_phase_resources(6, 0));
    println!(
        "  info: 12 blocks budget 6 vs 6 blocks: bytes {:.1}%, flops {:.1}%, peak words {:.1}%",
        rel(d.comm_bytes(), s.comm_bytes()) * 100.0,
        rel(d.flops(), s.flops()) * 100.0,
        rel(d.peak_memory_words, s.peak_memory_words) * 100.0
    );
    let gaps = [
        ("bytes", rel(deep.comm_bytes(), shallow.comm_bytes())),
        ("flops", rel(deep.flops(), shallow.flops())),
        ("peak words", rel(deep.peak_memory_words, shallow.peak_memory_words)),
    ];
    for (name, gap) in gaps {
        ensure(gap <= 0.01, || format!("{name} differ by {:.2}%", gap * 100.0))?;
    }
    Ok(gaps.iter().map(|(n, g)| format!("{n} {:.3}%", g * 100.0)).collect::<Vec<_>>().join(", "))
}

fn learning_config(dir: &std::path::Path, seed: u64, mode: TrainingMode) -> ExperimentConfig {
    ExperimentConfig {
        encoder: EncoderConfig::desk(),
        fed: FedConfig {
            num_clients: 20,
            clients_per_round: 2,
            rounds_per_layer: 50,
            batch_size: 16,
            local_steps: 1,
            client_lr: 0.2,
            server_lr: 1.0,
            budget: 0,
            drop_rate: 0.5,
            seed,
            temperature: 0.5,
        },
        aug: AugmentConfig::default(),
        data: DataSource::Synth(SynthSpec { n_test: 1000, ..SynthSpec::new(4, 2000, 32, 32, 0) }),
        mode,
        eval: EvalConfig::default(),
        output_dir: Some(dir.to_path_buf()),
        workers: 1,
    }
}

fn learning_signal() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let base = learning_config(dir.path(), 0, TrainingMode::LayerWise);
    let (train, test) = (base.load_train().unwrap(), base.load_test().unwrap());
    let last = base.encoder.num_blocks;
    let mid = last / 2;
    let probe = |enc: &LayeredEncoder, layer: usize, cfg: &ExperimentConfig| {
        linear_probe(enc, layer, &train, &test, &cfg.eval, cfg.fed.seed).unwrap()
    };
    let seeds = [1u64, 2, 3];
    let (mut random, mut layerwise, mut dropout, mut fll_mid) = (0.0, 0.0, 0.0, 0.0);
    for &seed in &seeds {
        let cfg = learning_config(dir.path(), seed, TrainingMode::LayerWise);
        random += probe(&initial_encoder(&cfg).unwrap(), last, &cfg);
        let fll = cmd_pretrain(&cfg, None).unwrap().encoder;
        layerwise += probe(&fll, last, &cfg);
        fll_mid += probe(&fll, mid, &cfg);
        let cfg = learning_config(dir.path(), seed, TrainingMode::LayerWiseDropout);
        dropout += probe(&cmd_pretrain(&cfg, None).unwrap().encoder, last, &cfg);
    }
    let k = seeds.len() as f64;
    let (random, layerwise, dropout, fll_mid) = (random / k, layerwise / k, dropout / k, fll_mid / k);
    let secs = start.elapsed().as_secs_f64();

    // informational: end-to-end pretraining probed at the middle layer
    let info_start = Instant::now();
    let mut fel_mid = 0.0;
    for &seed in &seeds {
        let cfg = learning_config(dir.path(), seed, TrainingMode::EndToEnd);
        fel_mid += probe(&cmd_pretrain(&cfg, None).unwrap().encoder, mid, &cfg);
    }
    fel_mid /= k;
    println!(
        "  info: layer-{mid} probe, layer-wise {:.1}% vs end-to-end {:.1}% ({:.0}s)",
        fll_mid * 100.0,
        fel_mid * 100.0,
        info_start.elapsed().as_secs_f64()
    );

    let detail = format!(
        "layer-{last} probe: random {:.1}%, layer-wise {:.1}%, dropout {:.1}%; {secs:.0}s",
        random * 100.0,
        layerwise * 100.0,
        dropout * 100.0
    );
    ensure(layerwise - random >= 0.10, || format!("gain below 10 points: {detail}"))?;
    ensure((dropout - layerwise).abs() <= 0.03, || format!("dropout gap above 3 points: {detail}"))?;
    ensure(secs < 600.0, || format!("too slow: {detail}"))?;
    Ok(detail)
}

fn determinism() -> Outcome {
    let run = |workers: usize| {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = learning_config(dir.path(), 11, TrainingMode::LayerWiseDropout);
        cfg.fed = FedConfig { num_clients: 8, clients_per_round: 4, rounds_per_layer: 2, batch_size: 8, ..cfg.fed };
        cfg.data = DataSource::Synth(SynthSpec::new(4, 64, 32, 32, 1));
        cfg.workers = workers;
        cmd_pretrain(&cfg, None).unwrap();
        dir
    };
    let (a, b) = (run(1), run(3));
    let mut names: Vec<String> = (0..=6).map(phase_checkpoint_name).collect();
    names.push(FINAL_CHECKPOINT.into());
    names.push(METRICS_FILE.into());
    for name in &names {
        let (x, y) = (std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap());
        ensure(x == y, || format!("{name} differs between 1 and 3 workers"))?;
    }
    Ok(format!("{} files byte-identical across 1 and 3 workers", names.len()))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("gradient checks", gradients),
        ("frozen-layer immutability", frozen_layers),
        ("FedAvg oracle", fedavg_oracle),
        ("depth dropout laws", dropout_laws),
        ("resource fractions", resource_fractions),
        ("budget equivalence", budget_equivalence),
        ("learning signal", learning_signal),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or(p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({detail})", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
