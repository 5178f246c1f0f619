//! Subcommand implementations. Each builds its artifacts in memory and hands
//! them to [`ArtifactSet`], so a failed run leaves no partial files behind.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::DVector;
use serde::Serialize;
use serde_json::json;

use fedp3_core::accounting::{deployed_size, param_counts, single_layer_variants, upload_cost, ArchSpec};
use fedp3_core::data::{gen_synthetic, split_classwise, split_dirichlet, train_test_split};
use fedp3_core::fedcore::{
    metrics_csv, predicted_upload, run_fedp3, AggregationMode, FedConfig, LocalConfig, LocalStrategy, Scheme,
};
use fedp3_core::ldp::{certify_ldp, run_ldp, LdpProblem, LdpRunConfig, NoisePlacement, PrivacyBudget};
use fedp3_core::objective::{LayeredModel, QuadraticProblem};
use fedp3_core::rng::{derive_seed, stream};
use fedp3_core::theory::{
    certify_convergence, comm_comparison, convergence_max_gamma, pruning_certificate, run_dgd, run_ist,
    run_pruned_ist_and_certify, BoundCertificate, CertMode, IstConfig, MaskDistribution, Trajectory,
};

use crate::config::{AggregationName, ExperimentConfig, PlacementName, SchemeName, Split, StrategyName};
use crate::output::{sha256_hex, ArtifactSet};
use crate::{CliError, Command, LdpOverrides, RunOptions, RunSummary};

const VERIFY_QUADRATIC: &str = include_str!("../fixtures/quadratic_n4_d8.txt");
const VERIFY_INTERPOLATION: &str = include_str!("../fixtures/interpolation_n2_d4.txt");
const VERIFY_SIGMA: &str = include_str!("../fixtures/sigma_golden.csv");

/// Standard errors a Monte-Carlo estimate may exceed its bound by before it
/// counts as a violation.
const SE_MARGIN: f64 = 3.0;

#[derive(Debug, Clone, Serialize)]
struct CertReport {
    name: String,
    pass: bool,
    lhs: f64,
    rhs: f64,
    se: f64,
    ci_half_width: f64,
    constants: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    note: Option<String>,
}

impl CertReport {
    fn from_bound(b: &BoundCertificate, pass: bool) -> Self {
        Self {
            name: b.name.clone(),
            pass,
            lhs: b.lhs,
            rhs: b.rhs,
            se: b.se,
            ci_half_width: SE_MARGIN * b.se,
            constants: b.constants.clone(),
            note: None,
        }
    }

    fn exact(name: &str, pass: bool, lhs: f64, rhs: f64, note: String) -> Self {
        Self {
            name: name.into(),
            pass,
            lhs,
            rhs,
            se: 0.0,
            ci_half_width: 0.0,
            constants: BTreeMap::new(),
            note: Some(note),
        }
    }
}

/// Run context shared by the subcommands.
struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    seed: u64,
    config_toml: String,
    config_sha256: String,
    artifacts: ArtifactSet,
    violations: Vec<String>,
    stdout: String,
}

impl Ctx<'_> {
    fn report(&mut self, command: &str, body: serde_json::Value) {
        let mut doc = json!({
            "command": command,
            "seed": self.seed,
            "config_sha256": self.config_sha256,
        });
        if let (Some(doc), serde_json::Value::Object(body)) = (doc.as_object_mut(), body) {
            doc.extend(body);
        }
        self.artifacts.add(
            "report.json",
            serde_json::to_string_pretty(&doc).expect("report serializes") + "\n",
        );
    }

    fn certificates(&mut self, certs: &[CertReport]) {
        for c in certs.iter().filter(|c| !c.pass) {
            self.violations.push(format!(
                "certificate {} failed: lhs {:e} vs rhs {:e}",
                c.name, c.lhs, c.rhs
            ));
        }
    }
}

pub(crate) fn execute(command: &Command, cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary, CliError> {
    let config_toml = cfg.to_toml();
    let mut ctx = Ctx {
        cfg,
        seed: cfg.train.seed,
        config_sha256: sha256_hex(config_toml.as_bytes()),
        config_toml,
        artifacts: ArtifactSet::new(&opts.out),
        violations: Vec::new(),
        stdout: String::new(),
    };
    match command {
        Command::Fedp3 => fedp3(&mut ctx)?,
        Command::Ist => ist(&mut ctx)?,
        Command::Dgd => dgd(&mut ctx)?,
        Command::Ldp(over) => ldp(&mut ctx, over)?,
        Command::Verify => verify(&mut ctx)?,
        Command::Account => account(&mut ctx)?,
    }
    let Ctx {
        seed,
        config_toml,
        artifacts,
        violations,
        stdout,
        ..
    } = ctx;
    let manifest = artifacts.write(command.name(), seed, &config_toml)?;
    Ok(RunSummary {
        manifest,
        violations,
        stdout,
    })
}

fn fedp3(ctx: &mut Ctx) -> Result<(), CliError> {
    let (cfg, seed) = (ctx.cfg, ctx.seed);
    let d = &cfg.data;
    let ds = gen_synthetic(d.samples, d.features, d.classes, d.separation, &mut stream(seed, &[1]))?;
    let part = match d.split {
        Split::Dirichlet => split_dirichlet(&ds, d.clients, d.alpha, &mut stream(seed, &[2]))?,
        Split::Classwise => split_classwise(&ds, d.clients, d.classes_per_client, &mut stream(seed, &[2]))?,
    };
    let shards = train_test_split(&ds, &part, d.train_fraction, &mut stream(seed, &[3]))?;
    let model = LayeredModel::mlp(d.features, &cfg.model.hidden, d.classes, &mut stream(seed, &[4]))?;

    let p = &cfg.plans;
    let fed = FedConfig {
        rounds: cfg.train.rounds,
        participation: cfg.train.participation,
        scheme: match p.scheme {
            SchemeName::Full => Scheme::Full,
            SchemeName::Lowerb => Scheme::LowerB,
            SchemeName::Opu2 => Scheme::Opu2,
            SchemeName::Opu3 => Scheme::Opu3,
            SchemeName::OpuRange => Scheme::OpuRange(p.opu_min, p.opu_max),
        },
        keep_ratio: p.keep_ratio,
        strategy: match p.strategy {
            StrategyName::Fixed => LocalStrategy::Fixed,
            StrategyName::Uniform => LocalStrategy::Uniform { q_lo: p.q_lo },
            StrategyName::OrderedDropout => LocalStrategy::OrderedDropout { q_lo: p.q_lo },
        },
        local: LocalConfig {
            steps: cfg.train.local_steps,
            lr: cfg.train.lr,
            batch_size: cfg.train.batch_size,
        },
        aggregation: match p.aggregation {
            AggregationName::Simple => AggregationMode::Simple,
            AggregationName::Weighted => AggregationMode::Weighted,
            AggregationName::Attention => AggregationMode::Attention { tau: p.tau },
        },
        seed,
    };
    let run = run_fedp3(&model, &shards, &fed)?;
    let last = run.metrics.last().expect("at least one round");
    let plans: Vec<_> = run
        .plans
        .iter()
        .map(|pl| {
            let names: Vec<&str> = pl.layers.iter().map(|&k| model.layers()[k].name.as_str()).collect();
            json!({ "client": pl.client_id, "layers": names })
        })
        .collect();
    let predicted = predicted_upload(&model, &run.plans, &fed);
    ctx.stdout = format!(
        "round {}: loss {:.4}, accuracy {:.4}, uploaded {} scalars\n",
        last.round, last.loss, last.accuracy, last.up_scalars_cum
    );
    ctx.artifacts.add("metrics.csv", metrics_csv(&run.metrics));
    ctx.report(
        "fedp3",
        json!({
            "final": {
                "round": last.round,
                "loss": last.loss,
                "accuracy": last.accuracy,
                "up_scalars_cum": last.up_scalars_cum,
                "down_scalars_cum": last.down_scalars_cum,
            },
            "predicted_upload": predicted,
            "model_params": model.param_count(),
            "plans": plans,
        }),
    );
    if predicted != last.up_scalars_cum {
        ctx.violations.push(format!(
            "upload counter {} differs from the plan prediction {predicted}",
            last.up_scalars_cum
        ));
    }
    Ok(())
}

fn quadratic_instance(ctx: &Ctx) -> Result<QuadraticProblem, CliError> {
    let m = &ctx.cfg.model;
    match &m.instance {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("model.instance {}: {e}", path.display())))?;
            QuadraticProblem::from_text(&text).map_err(|e| CliError::Config(format!("model.instance: {e}")))
        }
        None => Ok(QuadraticProblem::random(
            m.quad_clients,
            m.quad_dim,
            m.quad_mu,
            m.quad_linear,
            &mut stream(ctx.seed, &[1]),
        )?),
    }
}

fn trajectory_csv(t: &Trajectory) -> String {
    let mut out = String::from("k,grad_norm_sq,value\n");
    for (k, p) in t.points.iter().enumerate() {
        let _ = writeln!(out, "{k},{:?},{:?}", p.grad_norm_sq, p.value);
    }
    out
}

fn ist(ctx: &mut Ctx) -> Result<(), CliError> {
    let p = quadratic_instance(ctx)?;
    let k = ctx.cfg.train.rounds;
    let s = p.smoothness();
    let max_gamma = convergence_max_gamma(s.l_bar, s.l_max, k);
    let gamma = ctx.cfg.train.gamma.unwrap_or(max_gamma);
    let keep = ctx.cfg.plans.keep_ratio;
    let w0 = DVector::from_element(p.dim(), 1.0);
    let cfg = IstConfig {
        gamma,
        iterations: k,
        keep_ratio: (keep < 1.0).then_some(keep),
        sketches: true,
    };
    let traj = run_ist(&p, &cfg, &w0, &mut stream(ctx.seed, &[3]))?;

    let cert = if keep < 1.0 {
        None
    } else if gamma <= max_gamma {
        let b = certify_convergence(&p, gamma, k, &w0, ctx.cfg.train.cert_seeds, derive_seed(ctx.seed, &[4]))?;
        let pass = !b.violated_beyond(SE_MARGIN);
        Some(CertReport::from_bound(&b, pass))
    } else {
        None
    };
    let note = match (&cert, keep < 1.0) {
        (Some(_), _) => None,
        (None, true) => Some("convergence certificate covers unpruned runs only".to_string()),
        (None, false) => Some(format!(
            "gamma {gamma} exceeds the admissible {max_gamma}; not certified"
        )),
    };
    if let Some(c) = &cert {
        ctx.certificates(std::slice::from_ref(c));
    }
    ctx.stdout = format!(
        "{} iterations, final ||grad f||^2 {:e}, uploaded {} scalars\n",
        k,
        traj.last().grad_norm_sq,
        traj.upload_scalars
    );
    ctx.artifacts.add("trajectory.csv", trajectory_csv(&traj));
    ctx.report(
        "ist",
        json!({
            "n_clients": p.n_clients(),
            "dim": p.dim(),
            "gamma": gamma,
            "max_gamma": max_gamma,
            "l_bar": s.l_bar,
            "l_max": s.l_max,
            "upload_scalars": traj.upload_scalars,
            "certificate": cert,
            "note": note,
        }),
    );
    Ok(())
}

fn dgd(ctx: &mut Ctx) -> Result<(), CliError> {
    let p = quadratic_instance(ctx)?;
    let s = p.smoothness();
    let gamma = ctx.cfg.train.gamma.unwrap_or(1.0 / s.l_bar);
    let w0 = DVector::from_element(p.dim(), 1.0);
    let run = run_dgd(&p, gamma, ctx.cfg.train.rounds, &w0)?;
    ctx.stdout = format!(
        "{} iterations, final ||grad f||^2 {:e}, uploaded {} scalars\n",
        ctx.cfg.train.rounds,
        run.trajectory.last().grad_norm_sq,
        run.upload_scalars
    );
    ctx.artifacts.add("trajectory.csv", trajectory_csv(&run.trajectory));
    ctx.report(
        "dgd",
        json!({
            "n_clients": p.n_clients(),
            "dim": p.dim(),
            "gamma": gamma,
            "l_bar": s.l_bar,
            "upload_scalars": run.upload_scalars,
            "download_scalars": run.download_scalars,
        }),
    );
    Ok(())
}

fn ldp_certificate(ctx: &Ctx, over: &LdpOverrides) -> Result<(serde_json::Value, CertReport, String), CliError> {
    let q = &ctx.cfg.privacy;
    let m = over.m.unwrap_or(q.m);
    let center = DVector::from_element(q.dim, q.center);
    let p = LdpProblem::random(q.clients, m, q.dim, &center, q.spread, &mut stream(ctx.seed, &[1]))?;
    let w0 = DVector::zeros(q.dim);
    let budget = PrivacyBudget {
        epsilon: over.epsilon.unwrap_or(q.epsilon),
        delta: over.delta.unwrap_or(q.delta),
        m,
        batch: over.batch.unwrap_or(q.batch),
        clip: over.clip.or(q.clip).unwrap_or_else(|| p.calibrate_clip(&w0)),
        c: over.c.unwrap_or(q.c),
        c_prime: q.c_prime,
        smoothness: 1.0,
    };
    budget
        .validate()
        .map_err(|e| CliError::Config(format!("privacy: {e}")))?;
    let placement = match q.placement {
        PlacementName::Model => NoisePlacement::Model,
        PlacementName::Gradient => NoisePlacement::Gradient,
    };
    let seeds = over.seeds.unwrap_or(q.seeds);
    let master = derive_seed(ctx.seed, &[2]);
    let cert = certify_ldp(&p, &budget, &w0, seeds, master, placement)?;
    let first = run_ldp(
        &p,
        &LdpRunConfig {
            rounds: cert.schedule.k,
            gamma: cert.schedule.gamma,
            sigma_sq: cert.noise.sigma_sq,
            batch: budget.batch,
            clip: budget.clip,
            placement,
        },
        &w0,
        derive_seed(master, &[0]),
    )?;
    let mut csv = String::from("k,grad_norm_sq\n");
    for (k, g) in first.grad_norms.iter().enumerate() {
        let _ = writeln!(csv, "{k},{g:?}");
    }
    let report = CertReport::from_bound(&cert.bound, !cert.bound.violated_beyond(SE_MARGIN));
    let body = json!({
        "budget": budget,
        "schedule": cert.schedule,
        "noise": cert.noise,
        "comm": cert.comm,
        "validity_gate": cert.validity_gate,
        "certificate": report,
    });
    Ok((body, report, csv))
}

fn ldp(ctx: &mut Ctx, over: &LdpOverrides) -> Result<(), CliError> {
    let (body, report, csv) = ldp_certificate(ctx, over)?;
    ctx.certificates(std::slice::from_ref(&report));
    ctx.stdout = format!(
        "K={}, (1/K) sum ||grad f||^2 = {:e} (se {:.1e}) vs bound {:e}: {}\n",
        report.constants.get("K").copied().unwrap_or(f64::NAN),
        report.lhs,
        report.se,
        report.rhs,
        if report.pass { "pass" } else { "FAIL" }
    );
    ctx.artifacts.add("trajectory.csv", csv);
    ctx.report("ldp", body);
    Ok(())
}

/// `(c, clip, K, delta, m, epsilon, sigma_sq)` rows of the golden file.
fn sigma_fixture() -> Result<Vec<[f64; 7]>, CliError> {
    VERIFY_SIGMA
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| {
            let vals: Vec<f64> = l
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| CliError::Run(format!("bad sigma fixture row `{l}`: {e}")))?;
            vals.try_into()
                .map_err(|_| CliError::Run(format!("sigma fixture row `{l}` needs 7 fields")))
        })
        .collect()
}

fn verify(ctx: &mut Ctx) -> Result<(), CliError> {
    let mut certs = Vec::new();

    let quad = QuadraticProblem::from_text(VERIFY_QUADRATIC)?;
    let s = quad.smoothness();
    let k = 30;
    let w0 = DVector::from_element(quad.dim(), 1.0);
    let gamma = convergence_max_gamma(s.l_bar, s.l_max, k);
    let b = certify_convergence(&quad, gamma, k, &w0, 200, derive_seed(ctx.seed, &[1]))?;
    certs.push(CertReport::from_bound(&b, !b.violated_beyond(SE_MARGIN)));

    let interp = QuadraticProblem::from_text(VERIFY_INTERPOLATION)?;
    let dist = MaskDistribution {
        keep_ratio: 0.75,
        shared: false,
    };
    let analysis = pruning_certificate(&interp, dist, CertMode::Exhaustive)?;
    let w0 = DVector::from_element(interp.dim(), 1.0);
    let pruned = run_pruned_ist_and_certify(&interp, &analysis, k, &w0, 500, derive_seed(ctx.seed, &[2]), None)?;
    let slack = analysis.theta_slack.unwrap_or(f64::NEG_INFINITY);
    let mut r = CertReport::from_bound(
        &pruned.bound,
        analysis.w_psd && slack >= -1e-8 && pruned.bound.satisfied && pruned.fraction_within >= 0.99,
    );
    r.note = Some(format!(
        "W psd {}, theta slack {slack:e}, {:.1}% of seeds within the bound",
        analysis.w_psd,
        100.0 * pruned.fraction_within
    ));
    certs.push(r);

    let rows = sigma_fixture()?;
    let mut worst: f64 = 0.0;
    for [c, clip, kk, delta, m, epsilon, want] in &rows {
        let budget = PrivacyBudget {
            epsilon: *epsilon,
            delta: *delta,
            m: *m as usize,
            batch: 1,
            clip: *clip,
            c: *c,
            c_prime: 1.0,
            smoothness: 1.0,
        };
        let got = fedp3_core::ldp::calibrate_sigma(&budget, *kk as usize, 1)?.sigma_sq;
        worst = worst.max(((got - want) / want).abs());
    }
    certs.push(CertReport::exact(
        "sigma_calibration",
        worst <= 1e-12,
        worst,
        1e-12,
        format!("max relative error over {} golden budgets", rows.len()),
    ));

    let delta0 = quad.global_value(&DVector::from_element(quad.dim(), 1.0))? - quad.f_inf()?;
    let comm = comm_comparison(delta0, s.l_bar, s.l_max, quad.n_clients(), quad.dim(), 0.1)?;
    let d = quad.dim() as u128;
    let n = quad.n_clients() as u128;
    certs.push(CertReport::exact(
        "per_round_upload",
        comm.per_round_fedp3 == d && comm.per_round_dgd == n * d,
        comm.per_round_fedp3 as f64,
        d as f64,
        format!(
            "sketched {} vs d = {d}; dgd {} vs n d = {}",
            comm.per_round_fedp3,
            comm.per_round_dgd,
            n * d
        ),
    ));

    let (_, ldp_cert, _) = ldp_certificate(ctx, &LdpOverrides::default())?;
    certs.push(ldp_cert);

    ctx.certificates(&certs);
    for c in &certs {
        let _ = writeln!(
            ctx.stdout,
            "{} {}: lhs {:e} rhs {:e}",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.lhs,
            c.rhs
        );
    }
    ctx.report("verify", json!({ "certificates": certs }));
    Ok(())
}

fn account(ctx: &mut Ctx) -> Result<(), CliError> {
    let arch = ArchSpec::preset(&ctx.cfg.model.arch).map_err(|e| CliError::Config(format!("model.arch: {e}")))?;
    let p = ctx.cfg.plans.keep_ratio;
    let fin = arch.final_layer().name.clone();
    let variants = single_layer_variants(&arch, p)?;
    let mut csv = String::from("layer,params,deployed_at_p,upload\n");
    for (name, params) in param_counts(&arch) {
        let (deployed, upload) = match variants.iter().find(|v| v.layer == name) {
            Some(v) => (v.deployed, v.upload),
            None => (deployed_size(&arch, &[&fin], p)?, upload_cost(&arch, &[&fin])?),
        };
        let _ = writeln!(csv, "{name},{params},{deployed},{upload}");
    }
    ctx.stdout = csv.clone();
    ctx.artifacts.add("account.csv", csv);
    ctx.report(
        "account",
        json!({ "arch": arch.name, "keep_ratio": p, "total_params": arch.total_params() }),
    );
    Ok(())
}
