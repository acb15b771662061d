//! Command implementations. Every command takes its resolved configuration
//! as JSON so fresh runs and manifest reruns share one code path.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use tvrp_autodiff::GradCheckOptions;
use tvrp_core::format::{instance_from_json, instance_to_json};
use tvrp_core::generate::{random_instance, synthetic_avrp, AvrpParams, GenParams, Window};
use tvrp_core::oracle::{Oracle, MAX_LEGS};
use tvrp_core::{EnvConfig, Instance};
use tvrp_policy::{check_policy_gradients, Policy, PolicyConfig};
use tvrp_train::{rollout, Decode, Precision, TrainConfig, TrainEvent, Trainer};
use tvrp_workflow::{execution_loop, full_scale_simulate_with, BoxInventory, ExecutionParams, LoadRule, SuggestedRoutes, BOX_VOLUME};

use crate::config::{self, ConfigError};
use crate::manifest::{sha256_hex, Manifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Random,
    Avrp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub generator: Generator,
    pub seed: u64,
    pub random: GenParams,
    pub avrp: AvrpParams,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self { generator: Generator::Random, seed: 0, random: GenParams::default(), avrp: AvrpParams::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveConfig {
    pub instance: PathBuf,
    pub checkpoint: PathBuf,
    pub execution: ExecutionParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub instance: PathBuf,
    pub routes: PathBuf,
    /// Box inventory; derived from the instance demand when absent.
    pub boxes: Option<PathBuf>,
    pub box_volume: f64,
    /// Explicit window; takes precedence over `t_max_factor`.
    pub t_max: Option<f64>,
    /// Window as a multiple of the routes' latest arrival.
    pub t_max_factor: Option<f64>,
    pub load_rule: LoadRule,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            instance: PathBuf::new(),
            routes: PathBuf::new(),
            boxes: None,
            box_volume: BOX_VOLUME,
            t_max: None,
            t_max_factor: None,
            load_rule: LoadRule::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub instance: PathBuf,
    pub max_legs: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { instance: PathBuf::new(), max_legs: MAX_LEGS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub policy: PolicyConfig,
    pub policy_seed: u64,
    /// Instance file; a generated instance is used when absent.
    pub instance: Option<PathBuf>,
    pub generate: GenParams,
    pub instance_seed: u64,
    /// Decisions whose log-probabilities are differentiated.
    pub actions: usize,
    pub step: f64,
    pub tolerance: f64,
    pub floor: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        let o = GradCheckOptions::default();
        Self {
            policy: PolicyConfig { embed_dim: 16, heads: 2, ..PolicyConfig::default() },
            policy_seed: 0,
            instance: None,
            generate: GenParams { n: 5, window: Window::Unbounded, ..GenParams::default() },
            instance_seed: 0,
            actions: 3,
            step: o.step,
            tolerance: o.tolerance,
            floor: o.floor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalGenerate {
    pub params: GenParams,
    pub count: usize,
    pub seed: u64,
}

impl Default for EvalGenerate {
    fn default() -> Self {
        Self { params: GenParams::default(), count: 64, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub checkpoint: PathBuf,
    pub instances: Vec<PathBuf>,
    pub generate: Option<EvalGenerate>,
    pub precision: Precision,
    pub b_coverage: f64,
    pub max_steps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::new(),
            instances: Vec::new(),
            generate: None,
            precision: Precision::Single,
            b_coverage: tvrp_core::B_COVERAGE,
            max_steps: 1000,
        }
    }
}

/// Resolves a configuration for `command` from a file and overrides into
/// its JSON snapshot.
pub fn resolve(command: &str, file: Option<&Path>, overrides: &[String]) -> anyhow::Result<serde_json::Value> {
    fn snap<T: Serialize + serde::de::DeserializeOwned>(file: Option<&Path>, o: &[String]) -> anyhow::Result<serde_json::Value> {
        let c: T = config::load(file, o)?;
        Ok(serde_json::to_value(c)?)
    }
    match command {
        "gen" => snap::<GenConfig>(file, overrides),
        "train" => snap::<TrainConfig>(file, overrides),
        "solve" => snap::<SolveConfig>(file, overrides),
        "simulate" => snap::<SimulateConfig>(file, overrides),
        "oracle" => snap::<OracleConfig>(file, overrides),
        "gradcheck" => snap::<GradcheckConfig>(file, overrides),
        "eval" => snap::<EvalConfig>(file, overrides),
        other => Err(ConfigError(format!("unknown command `{other}`")).into()),
    }
}

/// Runs `command` with a resolved configuration, writing outputs and the
/// manifest into `out`.
pub fn execute(command: &str, config: &serde_json::Value, out: &Path) -> anyhow::Result<Manifest> {
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let mut run = Run { out: out.to_path_buf(), manifest: Manifest::new(command, None, config.clone()) };
    match command {
        "gen" => gen(config::from_json(config)?, &mut run)?,
        "train" => train(config::from_json(config)?, &mut run)?,
        "solve" => solve(config::from_json(config)?, &mut run)?,
        "simulate" => simulate(config::from_json(config)?, &mut run)?,
        "oracle" => oracle(config::from_json(config)?, &mut run)?,
        "gradcheck" => gradcheck(config::from_json(config)?, &mut run)?,
        "eval" => eval(config::from_json(config)?, &mut run)?,
        other => return Err(ConfigError(format!("unknown command `{other}`")).into()),
    }
    run.manifest.write(out)?;
    Ok(run.manifest)
}

struct Run {
    out: PathBuf,
    manifest: Manifest,
}

impl Run {
    fn write(&mut self, name: &str, bytes: &[u8]) -> anyhow::Result<()> {
        let path = self.out.join(name);
        std::fs::write(&path, bytes).with_context(|| format!("cannot write {}", path.display()))?;
        self.manifest.outputs.insert(name.into(), sha256_hex(bytes));
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> anyhow::Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    fn read_instance(&mut self, name: &str, path: &Path) -> anyhow::Result<Instance> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read instance {}", path.display()))?;
        let inst = instance_from_json(&text).with_context(|| format!("instance {}", path.display()))?;
        self.manifest.input(name, path)?;
        Ok(inst)
    }

    fn read_policy(&mut self, path: &Path) -> anyhow::Result<Policy> {
        let p = Policy::load(path).with_context(|| format!("checkpoint {}", path.display()))?;
        self.manifest.input("checkpoint", path)?;
        Ok(p)
    }

    fn read_json<T: serde::de::DeserializeOwned>(&mut self, name: &str, path: &Path) -> anyhow::Result<T> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        let v = tvrp_core::format::from_json_with_path(&text).with_context(|| format!("{name} file {}", path.display()))?;
        self.manifest.input(name, path)?;
        Ok(v)
    }
}

fn gen(c: GenConfig, run: &mut Run) -> anyhow::Result<()> {
    run.manifest.seed = Some(c.seed);
    let inst = match c.generator {
        Generator::Random => random_instance(&c.random, c.seed)?,
        Generator::Avrp => synthetic_avrp(&c.avrp, c.seed)?,
    };
    run.write("instance.json", instance_to_json(&inst).as_bytes())?;
    eprintln!("instance: {} nodes, {} demand entries, total volume {:.4}", inst.num_nodes(), inst.demand().len(), inst.initial_total());
    Ok(())
}

fn train(c: TrainConfig, run: &mut Run) -> anyhow::Result<()> {
    run.manifest.seed = Some(c.seed);
    let mut trainer = Trainer::new(c)?;
    let mut metrics = String::new();
    let epochs = trainer.run(|event| {
        let line = match event {
            TrainEvent::Batch(b) => serde_json::json!({ "kind": "batch", "stats": b }),
            TrainEvent::Epoch(e, _) => {
                eprintln!(
                    "epoch {:>3}: train cost {:.4}, win rate {:.3}, validation cost {:.4}{}",
                    e.epoch,
                    e.train_cost,
                    e.win_rate,
                    e.validation_cost,
                    if e.baseline_updated { ", baseline updated" } else { "" }
                );
                serde_json::json!({ "kind": "epoch", "stats": e })
            }
        };
        metrics.push_str(&line.to_string());
        metrics.push('\n');
    })?;
    run.write("metrics.jsonl", metrics.as_bytes())?;
    run.write_json("epochs.json", &epochs)?;
    run.write("policy.ckpt", &trainer.policy().to_bytes())?;
    Ok(())
}

fn solve(c: SolveConfig, run: &mut Run) -> anyhow::Result<()> {
    run.manifest.seed = Some(c.execution.seed);
    let inst = run.read_instance("instance", &c.instance)?;
    let policy = run.read_policy(&c.checkpoint)?;
    let res = execution_loop(&inst, &policy, &c.execution)?;
    run.write_json("routes.json", &res.routes)?;
    run.write_json("solve.json", &res)?;
    eprintln!(
        "solved: {} iterations, {} trucks, coverage {:.6}, max route time {:.4}",
        res.iterations.len(),
        res.total_trucks,
        res.coverage(),
        res.max_route_time
    );
    Ok(())
}

fn simulate(c: SimulateConfig, run: &mut Run) -> anyhow::Result<()> {
    if !(c.box_volume > 0.0 && c.box_volume <= 1.0) {
        return Err(ConfigError(format!("box_volume must lie in (0, 1], got {}", c.box_volume)).into());
    }
    let inst = run.read_instance("instance", &c.instance)?;
    let routes: SuggestedRoutes = run.read_json("routes", &c.routes)?;
    if routes.version != tvrp_workflow::ROUTES_VERSION {
        return Err(ConfigError(format!("routes version {} is not supported", routes.version)).into());
    }
    let n = inst.num_nodes();
    if routes.trucks.iter().flat_map(|t| &t.nodes).any(|&v| v >= n) {
        return Err(ConfigError(format!("routes visit a node outside the instance's {n} nodes")).into());
    }
    let boxes = match &c.boxes {
        Some(p) => run.read_json("boxes", p)?,
        None => BoxInventory::from_instance(&inst, c.box_volume),
    };
    let t_max = match (c.t_max, c.t_max_factor) {
        (Some(t), _) => t,
        (None, Some(f)) => f * routes.max_route_time(&inst),
        (None, None) => inst.t_max(),
    };
    let report = full_scale_simulate_with(&boxes, &routes, &inst, t_max, c.load_rule);
    run.write_json("report.json", &report)?;
    let mut table = String::new();
    writeln!(table, "# fulfillment report v{}", report.version)?;
    writeln!(table, "window {t_max}")?;
    writeln!(table, "boxes returned {} of {} ({:.4})", report.returned, report.total, report.fulfillment)?;
    writeln!(table, "truncated trucks {:?}", report.truncated_trucks)?;
    writeln!(table, "box\tvolume\tpath\tvisited\tlocation\treturned")?;
    for b in &report.boxes {
        let loc = match b.location {
            tvrp_workflow::BoxLocation::Node(v) => format!("node {v}"),
            tvrp_workflow::BoxLocation::Truck(m) => format!("truck {m}"),
        };
        writeln!(table, "{}\t{:.6}\t{:?}\t{:?}\t{loc}\t{}", b.id, b.volume, b.path(), b.visited(), b.returned)?;
    }
    run.write("report.txt", table.as_bytes())?;
    eprintln!("fulfillment {:.4} ({} of {} boxes)", report.fulfillment, report.returned, report.total);
    Ok(())
}

fn oracle(c: OracleConfig, run: &mut Run) -> anyhow::Result<()> {
    let inst = run.read_instance("instance", &c.instance)?;
    let opt = Oracle::new(&inst)?.optimum(c.max_legs)?;
    match &opt {
        Some(o) => println!("optimal route {:?} time {} ({} routes explored)", o.route, o.time, o.explored),
        None => println!("no route of at most {} legs satisfies the demand", c.max_legs),
    }
    run.write_json("oracle.json", &opt)?;
    Ok(())
}

fn gradcheck(c: GradcheckConfig, run: &mut Run) -> anyhow::Result<()> {
    run.manifest.seed = Some(c.policy_seed);
    let inst = match &c.instance {
        Some(p) => run.read_instance("instance", p)?,
        None => random_instance(&GenParams { num_trucks: c.policy.num_trucks, ..c.generate.clone() }, c.instance_seed)?,
    };
    let policy = Policy::new(c.policy.clone(), c.policy_seed)?;
    let options = GradCheckOptions { step: c.step, tolerance: c.tolerance, floor: c.floor };
    let report = check_policy_gradients(&policy, &Arc::new(inst), c.actions, options)?;
    run.write_json("gradcheck.json", &report)?;
    for b in &report.blocks {
        println!("{:<32} {:>6} entries  max rel err {:.3e}", b.name, b.entries, b.max_rel_err);
    }
    println!("max relative error {:.3e}: {}", report.max_rel_err, if report.passed { "pass" } else { "FAIL" });
    if !report.passed {
        anyhow::bail!("gradient check failed: max relative error {:.3e} above {:.1e}", report.max_rel_err, c.tolerance);
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalRow {
    instance: String,
    objective: f64,
    coverage: f64,
    finish_time: f64,
}

fn eval(c: EvalConfig, run: &mut Run) -> anyhow::Result<()> {
    let policy = run.read_policy(&c.checkpoint)?;
    let mut set: Vec<(String, Arc<Instance>)> = Vec::new();
    for (k, p) in c.instances.iter().enumerate() {
        set.push((p.display().to_string(), Arc::new(run.read_instance(&format!("instance_{k}"), p)?)));
    }
    if let Some(g) = &c.generate {
        run.manifest.seed = Some(g.seed);
        for k in 0..g.count {
            let inst = random_instance(&g.params, tvrp_core::derive_seed(g.seed, 0, k as u64))?;
            set.push((format!("generated_{k}"), Arc::new(inst)));
        }
    }
    if set.is_empty() {
        return Err(ConfigError("eval needs `instances` or `generate`".into()).into());
    }
    let env = EnvConfig { num_trucks: policy.config().num_trucks, max_steps: c.max_steps, record_events: false };
    let mut rows = Vec::with_capacity(set.len());
    for (name, inst) in &set {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let r = match c.precision {
            Precision::Single => rollout::<f32>(&policy, inst, env, Decode::Greedy, &mut rng, c.b_coverage)?,
            Precision::Double => rollout::<f64>(&policy, inst, env, Decode::Greedy, &mut rng, c.b_coverage)?,
        };
        rows.push(EvalRow { instance: name.clone(), objective: r.objective, coverage: r.eta, finish_time: r.finish_time });
    }
    let mean = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    let summary = serde_json::json!({
        "instances": rows.len(),
        "mean_objective": mean(|r| r.objective),
        "mean_coverage": mean(|r| r.coverage),
        "mean_finish_time": mean(|r| r.finish_time),
        "rows": rows,
    });
    run.write_json("eval.json", &summary)?;
    println!("{:<24} {:>12} {:>10} {:>12}", "instance", "F", "eta", "T");
    for r in &rows {
        println!("{:<24} {:>12.6} {:>10.6} {:>12.6}", r.instance, r.objective, r.coverage, r.finish_time);
    }
    println!("{:<24} {:>12.6} {:>10.6} {:>12.6}", "mean", mean(|r| r.objective), mean(|r| r.coverage), mean(|r| r.finish_time));
    Ok(())
}
