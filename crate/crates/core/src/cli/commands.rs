use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use serde::Serialize;

use super::config::ExperimentConfig;
use crate::data::{self, ClientPartition, Dataset};
use crate::diagnostics::{self, RoundRecord};
use crate::error::{Error, Result};
use crate::fl::{self, Federation, RunOutcome};
use crate::model::{ModelSpec, ParamVector};
use crate::privacy::{self, AttackProblem};
use crate::rng::{self, Purpose};

/// Fixed-width float cell; `None` becomes an empty cell.
fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.16e}")).unwrap_or_default()
}

pub const ROUNDS_HEADER: &str = "round,accuracy,mean_loss_prev,mean_loss_curr,increment,fisher_rho,flagged";

pub fn rounds_csv(records: &[RoundRecord]) -> String {
    let mut out = String::from(ROUNDS_HEADER);
    out.push('\n');
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.round,
            cell(Some(r.test_accuracy)),
            cell(r.mean_loss_prev),
            cell(r.mean_loss_curr),
            cell(r.mean_increment),
            cell(r.fisher_rho),
            r.flagged
        )
        .unwrap();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub algorithm: String,
    pub rounds: usize,
    pub seed: u64,
    pub final_accuracy: f64,
    pub reference_accuracy: Option<f64>,
    /// Rounds needed to reach 50/90/100% of the reference; `null` when the
    /// target was never reached or no reference was configured.
    pub r_0_5: Option<usize>,
    pub r_0_9: Option<usize>,
    pub r_1_0: Option<usize>,
    pub flagged_updates: usize,
}

pub fn summarize(cfg: &ExperimentConfig, records: &[RoundRecord]) -> RunSummary {
    let accuracy: Vec<f64> = records.iter().map(|r| r.test_accuracy).collect();
    let r = |a: f64| {
        cfg.reference_accuracy
            .and_then(|reference| diagnostics::rounds_to_fraction(&accuracy, reference, a))
    };
    RunSummary {
        algorithm: cfg.algorithm().name().to_string(),
        rounds: records.len(),
        seed: cfg.seed,
        final_accuracy: accuracy.last().copied().unwrap_or(0.0),
        reference_accuracy: cfg.reference_accuracy,
        r_0_5: r(0.5),
        r_0_9: r(0.9),
        r_1_0: r(1.0),
        flagged_updates: records.iter().map(|r| r.flagged).sum(),
    }
}

struct Prepared {
    spec: ModelSpec,
    train: Dataset,
    test: Dataset,
    partition: ClientPartition,
}

fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let spec = cfg.model_spec()?;
    let (train, test) = cfg.load_data()?;
    let partition = data::partition(
        &train,
        cfg.partition.scheme,
        cfg.partition.n_clients,
        cfg.seed,
        &cfg.partition.params(),
    )?;
    Ok(Prepared {
        spec,
        train,
        test,
        partition,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn execute(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutcome> {
    std::fs::create_dir_all(out)?;
    cfg.echo(out)?;
    let p = prepare(cfg)?;
    let fed = Federation {
        spec: &p.spec,
        train: &p.train,
        partition: &p.partition,
        test: &p.test,
    };
    let outcome = fl::run_rounds_with(fed, &cfg.run_config()?, None, |r| {
        log::info!("round {:>4}  accuracy {:.4}  flagged {}", r.round, r.test_accuracy, r.flagged);
        Ok(())
    })?;
    std::fs::write(out.join("rounds.csv"), rounds_csv(&outcome.records))?;
    write_json(&out.join("summary.json"), &summarize(cfg, &outcome.records))?;
    Ok(outcome)
}

/// Trains for `rounds`; writes `config.toml`, `rounds.csv` and `summary.json`.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    let outcome = execute(cfg, out)?;
    Ok(summarize(cfg, &outcome.records))
}

/// Like [`cmd_run`] with forgetting and Fisher diagnostics switched on, plus
/// per-client `forgetting.csv` and per-layer `fisher_layers.csv`.
pub fn cmd_diagnose(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<RoundRecord>> {
    let mut cfg = cfg.clone();
    cfg.diagnostics.forgetting = true;
    cfg.diagnostics.fisher = true;
    let outcome = execute(&cfg, out)?;

    let mut forgetting = String::from("round,trainer,client,loss_prev,loss_curr,increment\n");
    let mut layers = String::from("round,layer,fisher_rho\n");
    for r in &outcome.records {
        let main = r.losses.iter().map(|l| ("main", l));
        for (trainer, l) in main.chain(r.shadow_losses.iter().map(|l| ("shadow", l))) {
            writeln!(
                forgetting,
                "{},{},{},{},{},{}",
                r.round,
                trainer,
                l.client,
                cell(Some(l.loss_prev)),
                cell(Some(l.loss_curr)),
                cell(Some(diagnostics::forgetting_increment(l.loss_curr, l.loss_prev)))
            )
            .unwrap();
        }
        for (k, rho) in r.fisher_rho_layers.iter().enumerate() {
            writeln!(layers, "{},{},{}", r.round, k, cell(*rho)).unwrap();
        }
    }
    std::fs::write(out.join("forgetting.csv"), forgetting)?;
    std::fs::write(out.join("fisher_layers.csv"), layers)?;
    Ok(outcome.records)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientStats {
    pub client: usize,
    pub size: usize,
    pub class_counts: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartitionStats {
    pub scheme: data::Scheme,
    pub n_clients: usize,
    pub total_examples: usize,
    /// client size -> number of clients with that size
    pub size_histogram: BTreeMap<usize, usize>,
    /// classes held -> number of clients
    pub classes_per_client: BTreeMap<usize, usize>,
    pub clients: Vec<ClientStats>,
}

pub fn partition_stats(train: &Dataset, partition: &ClientPartition) -> PartitionStats {
    let clients: Vec<ClientStats> = partition
        .assignments
        .iter()
        .enumerate()
        .map(|(client, idx)| {
            let mut class_counts = BTreeMap::new();
            for &i in idx {
                *class_counts.entry(train.labels[i]).or_insert(0) += 1;
            }
            ClientStats {
                client,
                size: idx.len(),
                class_counts,
            }
        })
        .collect();
    let mut size_histogram = BTreeMap::new();
    let mut classes_per_client = BTreeMap::new();
    for c in &clients {
        *size_histogram.entry(c.size).or_insert(0) += 1;
        *classes_per_client.entry(c.class_counts.len()).or_insert(0) += 1;
    }
    PartitionStats {
        scheme: partition.scheme,
        n_clients: clients.len(),
        total_examples: clients.iter().map(|c| c.size).sum(),
        size_histogram,
        classes_per_client,
        clients,
    }
}

/// Human-readable partition report.
pub fn render_partition_stats(stats: &PartitionStats) -> String {
    let mut s = String::new();
    writeln!(s, "clients: {}", stats.n_clients).unwrap();
    writeln!(s, "examples: {}", stats.total_examples).unwrap();
    for (k, n) in &stats.classes_per_client {
        writeln!(s, "classes per client: {k} ({n} clients)").unwrap();
    }
    writeln!(s, "size histogram:").unwrap();
    for (size, n) in &stats.size_histogram {
        writeln!(s, "  {size:>8}  {n}").unwrap();
    }
    s
}

/// Writes `partition.csv` and `partition.json`.
pub fn cmd_partition_stats(cfg: &ExperimentConfig, out: &Path) -> Result<PartitionStats> {
    std::fs::create_dir_all(out)?;
    cfg.echo(out)?;
    let p = prepare(cfg)?;
    let stats = partition_stats(&p.train, &p.partition);
    let mut csv = String::from("client,size,n_classes,class_counts\n");
    for c in &stats.clients {
        let counts: Vec<String> = c.class_counts.iter().map(|(k, v)| format!("{k}:{v}")).collect();
        writeln!(csv, "{},{},{},{}", c.client, c.size, c.class_counts.len(), counts.join(";")).unwrap();
    }
    std::fs::write(out.join("partition.csv"), csv)?;
    write_json(&out.join("partition.json"), &stats)?;
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackRow {
    pub target: usize,
    pub label: usize,
    pub defense: String,
    pub recovered_label: usize,
    pub psnr_db: f64,
    pub objective: f64,
}

/// Parameters the attacked client starts its local step from.
pub fn attack_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    fl::initial_params(spec, seed)
}

/// Inverts single-example updates of `attack.targets` test examples under
/// every configured defense. Writes `psnr.csv`, `truth.pgm` and one
/// `recon_<defense>.pgm` grid per defense.
pub fn cmd_attack(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<AttackRow>> {
    std::fs::create_dir_all(out)?;
    cfg.echo(out)?;
    let spec = cfg.model_spec()?;
    let (_, test) = cfg.load_data()?;
    let a = &cfg.attack;
    let n_targets = a.targets.min(test.len());
    let mut pick = rng::stream(cfg.seed, Purpose::AttackTargets, 0, 0);
    let mut targets = index::sample(&mut pick, test.len(), n_targets).into_vec();
    targets.sort_unstable();

    let theta = attack_params(&spec, cfg.seed);
    let lr = cfg.train.learning_rate;
    let mut rows = Vec::new();
    let mut truths = Vec::new();
    let mut recons: BTreeMap<&'static str, Vec<Vec<f64>>> = BTreeMap::new();
    for (t, &i) in targets.iter().enumerate() {
        let example = test.batch(&[i]);
        let truth = example.inputs.row(0).to_vec();
        truths.push(truth.clone());
        for &name in &a.defenses {
            let defense = a.defense(name, cfg.train.fgsm_steps);
            let mut noise = rng::stream(cfg.seed, Purpose::DpNoise, t as u64, u64::MAX);
            let observed = privacy::simulated_update(&spec, &theta, &example, lr, &defense, &mut noise)?;
            let problem = AttackProblem {
                spec: &spec,
                theta: &theta,
                learning_rate: lr,
                observed: &observed,
                height: a.image_h,
                width: a.image_w,
            };
            let result = privacy::invert_gradient(&problem, &a.attack_config(cfg.seed ^ t as u64), Some(&truth))?;
            let psnr = result.psnr_db.unwrap_or(f64::NAN);
            log::info!("target {t} ({}) psnr {psnr:.2} dB", name.as_str());
            rows.push(AttackRow {
                target: i,
                label: test.labels[i],
                defense: name.as_str().to_string(),
                recovered_label: result.label,
                psnr_db: psnr,
                objective: result.objective,
            });
            recons.entry(name.as_str()).or_default().push(result.input);
        }
    }

    let mut csv = String::from("target,label,defense,recovered_label,psnr_db,objective\n");
    for r in &rows {
        writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.target,
            r.label,
            r.defense,
            r.recovered_label,
            cell(Some(privacy::psnr_capped(r.psnr_db))),
            cell(Some(r.objective))
        )
        .unwrap();
    }
    std::fs::write(out.join("psnr.csv"), csv)?;
    let columns = truths.len().min(8);
    privacy::write_pgm_grid(out.join("truth.pgm"), &truths, a.image_h, a.image_w, columns)?;
    for (name, images) in &recons {
        privacy::write_pgm_grid(out.join(format!("recon_{name}.pgm")), images, a.image_h, a.image_w, columns)?;
    }
    Ok(rows)
}

/// Mean PSNR per defense, capped like the CSV.
pub fn mean_psnr_by_defense(rows: &[AttackRow]) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = acc.entry(r.defense.clone()).or_insert((0.0, 0));
        e.0 += privacy::psnr_capped(r.psnr_db);
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}
