use std::path::Path;
use std::time::Instant;

use panelbot_core::cascade::{
    detect, evaluate_cascade, hard_negative_mine, synthesize_dataset, train_cascade, Cascade, MetricsReport,
};
use panelbot_core::geometry::{angular_distance, Vec3};
use panelbot_core::mission::{observe_valve, run_mission, track_wrenches, HeadLocator, MissionSummary};
use panelbot_core::panel::{find_panel, simulate_docking};
use panelbot_core::scene::{
    generate_scenario, handle_centroid_truth, head_bbox_truth, merged_base_scan, render_panel_image, Intrinsics, Scenario,
};
use panelbot_core::seed;
use panelbot_core::stats::Summary;
use panelbot_core::wrench::{select_target, wrench_camera, WRENCH_CAMERA_DEPTH_M};
use rayon::prelude::*;

use crate::args::{CascadeArgs, Command, Common, ReplayArgs, TrainArgs, ValveArgs};
use crate::report::{file_sha256, stats_cols, stats_header, stats_row, timing_text, STATS_COLS_HEADER, InputRecord, Manifest, Report};
use crate::settings::{apply_scenario, Override, Settings};
use crate::{artifact_records, CliError, Outcome};

/// Loaded inputs and effective parameters of one command.
struct Ctx<'a> {
    common: &'a Common,
    overrides: Vec<Override>,
    settings: Settings,
    scenario: Option<Scenario>,
    cascade: Option<Cascade>,
    inputs: Vec<InputRecord>,
}

impl Ctx<'_> {
    fn scenario(&self, command: &str) -> Result<&Scenario, CliError> {
        self.scenario.as_ref().ok_or_else(|| CliError::Usage(format!("{command} needs --scenario")))
    }

    fn cascade(&self, command: &str) -> Result<&Cascade, CliError> {
        self.cascade.as_ref().ok_or_else(|| CliError::Usage(format!("{command} needs --cascade")))
    }

    fn rep_seed(&self, label: &str, rep: usize) -> u64 {
        seed::derive_indexed(self.common.seed, label, rep as u64)
    }

    fn header(&self, command: &str) -> Report {
        let mut r = Report::new(command, self.common.seed);
        r.field("reps", self.common.reps);
        for i in &self.inputs {
            r.field(&format!("{} sha256", i.role), &i.sha256);
        }
        for o in &self.common.set {
            r.field("override", o);
        }
        r
    }
}

/// Body, timing and extra artifacts of one command.
struct Run {
    report: Report,
    timing: String,
    artifacts: Vec<(String, Vec<u8>)>,
}

/// Runs `f` for every repetition (concurrently), keeping repetition order,
/// and times each call.
fn timed_reps<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync) -> (Vec<T>, Vec<f64>) {
    (0..n)
        .into_par_iter()
        .map(|r| {
            let t = Instant::now();
            let v = f(r);
            (v, t.elapsed().as_secs_f64())
        })
        .unzip()
}

fn load_input(role: &str, path: &Path) -> Result<InputRecord, CliError> {
    Ok(InputRecord { role: role.into(), path: path.to_path_buf(), sha256: file_sha256(path)? })
}

pub(crate) fn execute(command: &Command) -> Result<Outcome, CliError> {
    let common = command.common().expect("pipeline commands carry common flags");
    if common.reps == 0 {
        return Err(CliError::Usage("--reps must be at least 1".into()));
    }
    let overrides = common.set.iter().map(|s| Override::parse(s)).collect::<Result<Vec<_>, _>>()?;
    let settings = Settings::resolve(&overrides)?;
    let mut inputs = Vec::new();
    let scenario = match &common.scenario {
        Some(p) => {
            inputs.push(load_input("scenario", p)?);
            Some(apply_scenario(&Scenario::load(p)?, &overrides)?)
        }
        None => None,
    };
    let cascade = match command.cascade_path() {
        Some(p) => {
            inputs.push(load_input("cascade", p)?);
            Some(Cascade::load(p)?)
        }
        None => None,
    };
    let ctx = Ctx { common, overrides, settings, scenario, cascade, inputs };
    let run = match command {
        Command::GenScenario(_) => gen_scenario(&ctx)?,
        Command::FindPanel(_) => find_panel_cmd(&ctx)?,
        Command::Dock(_) => dock(&ctx)?,
        Command::Detect(_) => detect_cmd(&ctx)?,
        Command::WrenchPose(a) => wrench_pose(&ctx, a)?,
        Command::ValvePose(a) => valve_pose(&ctx, a)?,
        Command::Train(a) => train(&ctx, a)?,
        Command::Evaluate(_) => evaluate(&ctx)?,
        Command::RunMission(a) => mission(&ctx, a)?,
        Command::Replay(_) => unreachable!("replay is dispatched separately"),
    };
    let report = run.report.into_string();
    let mut recorded = command.clone();
    if let Some(c) = recorded.common_mut() {
        c.out = None;
    }
    let manifest = Manifest {
        tool: "panelbot".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: recorded,
        seed: common.seed,
        inputs: ctx.inputs,
        parameters: ctx.settings,
        artifacts: artifact_records(&report, &run.artifacts),
    };
    Ok(Outcome { report, timing: run.timing, artifacts: run.artifacts, manifest: Some(manifest), mismatch: false })
}

fn gen_scenario(ctx: &Ctx) -> Result<Run, CliError> {
    if ctx.common.out.is_none() {
        return Err(CliError::Usage("gen-scenario needs --out".into()));
    }
    let t = Instant::now();
    let sc = apply_scenario(&generate_scenario(&ctx.settings.gen, ctx.common.seed)?, &ctx.overrides)?;
    let elapsed = t.elapsed().as_secs_f64();
    let text = sc.to_toml()?;
    if Scenario::from_toml(&text)? != sc {
        return Err(panelbot_core::Error::ContractViolation("scenario does not round-trip".into()).into());
    }
    let mut r = ctx.header("gen-scenario");
    let p = &sc.arena.panel;
    r.field("panel", format!("x {:.3} y {:.3} heading {:.2} size {:.2} x {:.2}", p.x_m, p.y_m, p.heading_deg, p.width_m, p.thickness_m));
    r.field("start", format!("x {:.3} y {:.3} heading {:.2}", sc.start.x_m, sc.start.y_m, sc.start.heading_deg));
    r.field("patrol waypoints", sc.patrol.len());
    r.field("distractors", sc.arena.distractors.len());
    r.field("wrench side", format!("{:?}", sc.scene.wrench_side));
    r.field("target jaw mm", sc.scene.target_jaw_mm);
    r.field("valve angle deg", format!("{:.2}", sc.scene.valve.stem_angle_deg));
    r.section("wrenches");
    r.line(format!("{:>4} {:>8} {:>9} {:>9} {:>12} {:>7}", "slot", "jaw mm", "x mm", "y mm", "opening deg", "usable"));
    let usable = sc.scene.usable_indices();
    for (i, w) in sc.scene.wrenches.iter().enumerate() {
        r.line(format!(
            "{i:>4} {:>8.1} {:>9.1} {:>9.1} {:>12.2} {:>7}",
            w.jaw_mm,
            w.x_mm,
            w.y_mm,
            w.orientation_deg,
            usable.contains(&i)
        ));
    }
    r.field("scenario sha256", crate::report::sha256_hex(text.as_bytes()));
    Ok(Run { report: r, timing: timing_text("scenario generation", &[elapsed]), artifacts: vec![("scenario.toml".into(), text.into_bytes())] })
}

fn find_panel_cmd(ctx: &Ctx) -> Result<Run, CliError> {
    let sc = ctx.scenario("find-panel")?;
    let mission = &ctx.settings.mission;
    let panel = &sc.arena.panel;
    let dims = (panel.width_m, panel.thickness_m);
    let (results, secs) = timed_reps(ctx.common.reps, |rep| {
        let rs = ctx.rep_seed("find-panel", rep);
        let pts = merged_base_scan(&sc.arena, sc.start, &sc.robot, &sc.laser, seed::derive(rs, "scan"))?;
        find_panel(&pts, dims, &mission.finder, seed::derive(rs, "find"))
    });
    let mut r = ctx.header("find-panel");
    let mut first = 0;
    let mut ok = 0;
    let to_world = sc.start.transform();
    for (rep, res) in results.iter().enumerate() {
        r.section(&format!("rep {rep}"));
        let search = match res {
            Ok(s) => s,
            Err(e) => {
                r.line(format!("error {}", e.label()));
                continue;
            }
        };
        ok += 1;
        r.line(format!("{:>4} {:>7} {:>8} {:>8} {:>10} {:>9} {:>9} {:>6}", "rank", "cluster", "long m", "short m", "similarity", "x m", "y m", "panel"));
        let mut rank_of_panel = None;
        for (k, c) in search.candidates.iter().enumerate() {
            let w = to_world.apply(c.centroid);
            let is_panel = (w.x - panel.x_m).hypot(w.y - panel.y_m) <= panel.width_m / 2.0;
            if is_panel && rank_of_panel.is_none() {
                rank_of_panel = Some(k);
            }
            let e = c.extent.sorted_desc();
            r.line(format!(
                "{k:>4} {:>7} {:>8.3} {:>8.3} {:>10.4} {:>9.3} {:>9.3} {:>6}",
                c.cluster_id, e[0], e[1], c.similarity, w.x, w.y, is_panel
            ));
        }
        first += usize::from(rank_of_panel == Some(0));
        r.field("panel rank", rank_of_panel.map_or("-".to_string(), |k| k.to_string()));
    }
    if ok == 0 {
        return Err(results.into_iter().find_map(Result::err).expect("every rep failed").into());
    }
    r.section("summary");
    r.field("panel ranked first", format!("{first} of {}", ctx.common.reps));
    Ok(Run { report: r, timing: timing_text("panel search", &secs), artifacts: vec![] })
}

fn dock(ctx: &Ctx) -> Result<Run, CliError> {
    let sc = ctx.scenario("dock")?;
    let m = &ctx.settings.mission;
    let (results, secs) = timed_reps(ctx.common.reps, |rep| {
        simulate_docking(&sc.arena, sc.start, &sc.robot, &sc.laser, &m.finder, &m.docking, ctx.rep_seed("dock", rep))
    });
    let mut r = ctx.header("dock");
    r.section("runs");
    r.line(format!("{:>4} {:>9} {:>9} {:>9} {:>9} {:>9} {:>10}", "rep", "d m", "o m", "alpha deg", "x m", "y m", "heading"));
    let (mut d, mut o, mut a) = (vec![], vec![], vec![]);
    for (rep, res) in results.iter().enumerate() {
        match res {
            Ok(run) => {
                let p = run.final_pose;
                // alpha near 180 is a small error on the other side of 0
                let signed = if run.report.alpha > 90.0 { run.report.alpha - 180.0 } else { run.report.alpha };
                r.line(format!(
                    "{rep:>4} {:>9.4} {:>9.4} {:>9.3} {:>9.3} {:>9.3} {:>10.3}",
                    run.report.d, run.report.o, signed, p.x_m, p.y_m, p.heading_deg
                ));
                d.push(run.report.d);
                o.push(run.report.o);
                a.push(signed);
            }
            Err(e) => r.line(format!("{rep:>4} error {}", e.label())),
        }
    }
    if d.is_empty() {
        return Err(results.into_iter().find_map(Result::err).expect("every rep failed").into());
    }
    r.section("summary");
    r.line(format!("{:<14} {:>10} {STATS_COLS_HEADER}", "", "Desired"));
    for (label, desired, v) in [("d (m)", m.docking.distance_m, &d), ("o (m)", 0.0, &o), ("alpha (deg)", 0.0, &a)] {
        let s = Summary::of(v).expect("non-empty");
        r.line(format!("{label:<14} {desired:>10.3} {}", stats_cols(&s, 4)));
    }
    Ok(Run { report: r, timing: timing_text("docking", &secs), artifacts: vec![] })
}

fn detect_cmd(ctx: &Ctx) -> Result<Run, CliError> {
    let sc = ctx.scenario("detect")?;
    let cascade = ctx.cascade("detect")?;
    let m = &ctx.settings.mission;
    let intr = Intrinsics::default();
    let cam = wrench_camera(&sc.scene, &intr, WRENCH_CAMERA_DEPTH_M, Vec3::ZERO)?;
    let truth: Vec<_> = (0..sc.scene.wrenches.len()).filter_map(|i| head_bbox_truth(&sc.scene, i, &cam)).collect();
    let (results, secs) = timed_reps(ctx.common.reps, |rep| {
        let img = render_panel_image(&sc.scene, sc.scene.wrench_side, &cam, (intr.width, intr.height), &m.render, ctx.rep_seed("detect", rep))?;
        detect(&img, cascade, &ctx.settings.detect)
    });
    let mut r = ctx.header("detect");
    r.field("visible heads", truth.len());
    let (mut hits, mut false_pos, mut ok) = (0, 0, 0);
    for (rep, res) in results.iter().enumerate() {
        r.section(&format!("rep {rep}"));
        let dets = match res {
            Ok(d) => d,
            Err(e) => {
                r.line(format!("error {}", e.label()));
                continue;
            }
        };
        ok += 1;
        r.line(format!("{:>5} {:>5} {:>5} {:>5} {:>10} {:>9} {:>8}", "x", "y", "w", "h", "score", "neighbors", "best iou"));
        for d in dets {
            let iou = truth.iter().map(|t| t.iou(&d.bbox)).fold(0.0, f64::max);
            if iou >= 0.5 {
                hits += 1;
            } else {
                false_pos += 1;
            }
            r.line(format!(
                "{:>5} {:>5} {:>5} {:>5} {:>10.4} {:>9} {:>8.3}",
                d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h, d.score, d.neighbors, iou
            ));
        }
    }
    if ok == 0 {
        return Err(results.into_iter().find_map(Result::err).expect("every rep failed").into());
    }
    r.section("summary");
    r.field("matched detections", format!("{hits} of {} heads", truth.len() * ok));
    r.field("false positives", false_pos);
    Ok(Run { report: r, timing: timing_text("wrench detection", &secs), artifacts: vec![] })
}

fn wrench_pose(ctx: &Ctx, a: &CascadeArgs) -> Result<Run, CliError> {
    let sc = ctx.scenario("wrench-pose")?;
    let m = &ctx.settings.mission;
    let intr = Intrinsics::default();
    let cam = wrench_camera(&sc.scene, &intr, WRENCH_CAMERA_DEPTH_M, Vec3::ZERO)?;
    let (results, secs) = timed_reps(ctx.common.reps, |rep| {
        let rs = ctx.rep_seed("wrench-pose", rep);
        let boxes = match &ctx.cascade {
            Some(c) => {
                let img = render_panel_image(
                    &sc.scene,
                    sc.scene.wrench_side,
                    &cam,
                    (intr.width, intr.height),
                    &m.render,
                    seed::derive_indexed(rs, "wrench-frame", 0),
                )?;
                detect(&img, c, &ctx.settings.detect)?.into_iter().map(|d| d.bbox).collect()
            }
            None => (0..sc.scene.wrenches.len()).filter_map(|i| head_bbox_truth(&sc.scene, i, &cam)).collect::<Vec<_>>(),
        };
        let tracks = track_wrenches(sc, &cam, &boxes, m, rs)?;
        let widths: Vec<(usize, f64)> = tracks.iter().enumerate().map(|(k, t)| (k, t.estimate.jaw_width_mm)).collect();
        let choice = select_target(&widths, sc.scene.target_jaw_mm, m.width_tolerance_mm);
        Ok::<_, panelbot_core::Error>((tracks, choice))
    });
    let mut r = ctx.header("wrench-pose");
    r.field("head locator", if a.cascade.is_some() { "cascade" } else { "projected truth" });
    let mut ok = 0;
    let (mut grasp_err, mut orient_err) = (vec![], vec![]);
    for (rep, res) in results.iter().enumerate() {
        r.section(&format!("rep {rep}"));
        let (tracks, choice) = match res {
            Ok(v) => v,
            Err(e) => {
                r.line(format!("error {}", e.label()));
                continue;
            }
        };
        ok += 1;
        r.line(format!(
            "{:>4} {:>5} {:>5} {:>6} {:>8} {:>10} {:>9} {:>9} {:>9} {:>10} {:>10}",
            "head", "x", "y", "wrench", "jaw mm", "orient deg", "grasp x", "grasp y", "grasp z", "grasp err", "orient err"
        ));
        for (k, t) in tracks.iter().enumerate() {
            let g = cam.camera_to_world(t.estimate.grasp_point);
            let (ge, oe) = match t.wrench {
                Some(i) => {
                    let ge = handle_centroid_truth(&sc.scene, i, &cam, &t.handle_bbox).map(|h| g.distance(h) * 1000.0);
                    let oe = angular_distance(t.estimate.orientation_deg, sc.scene.wrenches[i].orientation_deg, 360.0);
                    (ge, Some(oe))
                }
                None => (None, None),
            };
            grasp_err.extend(ge);
            orient_err.extend(oe);
            let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
            r.line(format!(
                "{k:>4} {:>5} {:>5} {:>6} {:>8.2} {:>10.2} {:>9.4} {:>9.4} {:>9.4} {:>10} {:>10}",
                t.bbox.x,
                t.bbox.y,
                t.wrench.map_or("-".to_string(), |i| i.to_string()),
                t.estimate.jaw_width_mm,
                t.estimate.orientation_deg,
                g.x,
                g.y,
                g.z,
                opt(ge),
                opt(oe)
            ));
        }
        match choice {
            Ok((first, backup)) => {
                r.field("target head", first);
                r.field("backup head", backup.map_or("-".to_string(), |b| b.to_string()));
            }
            Err(e) => r.field("target head", format!("error {}", e.label())),
        }
    }
    if ok == 0 {
        return Err(results.into_iter().find_map(Result::err).expect("every rep failed").into());
    }
    r.section("summary");
    r.line(stats_header(""));
    if let Some(s) = Summary::of(&grasp_err) {
        r.line(stats_row("grasp err mm", &s, 3));
    }
    if let Some(s) = Summary::of(&orient_err) {
        r.line(stats_row("orient err deg", &s, 3));
    }
    Ok(Run { report: r, timing: timing_text("wrench pose", &secs), artifacts: vec![] })
}

/// Estimate expressed next to `truth` on the 90° circle.
fn unwrap_quarter(estimate: f64, truth: f64) -> f64 {
    let d = (estimate - truth + 45.0).rem_euclid(90.0) - 45.0;
    truth + d
}

fn valve_pose(ctx: &Ctx, a: &ValveArgs) -> Result<Run, CliError> {
    let sc = ctx.scenario("valve-pose")?;
    let m = &ctx.settings.mission;
    let angles = if a.angles.is_empty() { vec![sc.scene.valve.stem_angle_deg] } else { a.angles.clone() };
    let reps = ctx.common.reps;
    let (results, secs) = timed_reps(angles.len() * reps, |k| {
        let (ai, rep) = (k / reps, k % reps);
        let mut scene = sc.scene.clone();
        scene.valve.stem_angle_deg = angles[ai];
        let s = seed::derive_indexed(seed::derive_indexed(ctx.common.seed, "valve-pose", ai as u64), "rep", rep as u64);
        observe_valve(&scene, Vec3::ZERO, m, s).map(|e| (e, scene.valve.stem_top_center()))
    });
    let mut r = ctx.header("valve-pose");
    r.section("estimates");
    r.line(format!("{:>9} {:>4} {:>10} {:>10} {:>12} {:>8}", "alpha deg", "rep", "estimate", "error deg", "center err mm", "segments"));
    let mut rows = Vec::new();
    for (ai, &truth) in angles.iter().enumerate() {
        let (mut est, mut err, mut center) = (vec![], vec![], vec![]);
        let mut failed = Vec::new();
        for rep in 0..reps {
            match &results[ai * reps + rep] {
                Ok((e, stem)) => {
                    let u = unwrap_quarter(e.stem_angle_deg, truth);
                    let ce = e.center_3d.distance(*stem) * 1000.0;
                    r.line(format!(
                        "{truth:>9.2} {rep:>4} {u:>10.3} {:>10.3} {ce:>12.3} {:>8}",
                        (u - truth).abs(),
                        e.used_segments
                    ));
                    est.push(u);
                    err.push((u - truth).abs());
                    center.push(ce);
                }
                Err(e) => {
                    r.line(format!("{truth:>9.2} {rep:>4} error {}", e.label()));
                    failed.push(e.clone());
                }
            }
        }
        rows.push((truth, est, err, center, failed));
    }
    if rows.iter().all(|row| row.1.is_empty()) {
        let e = rows.into_iter().find_map(|row| row.4.into_iter().next()).expect("every estimate failed");
        return Err(e.into());
    }
    r.section("table");
    r.line(format!(
        "{:<10} {:>9} {:>9} {:>9} {:>9} {:>11} {:>14} {:>7}",
        "alpha (deg)", "Average", "Median", "Maximum", "Minimum", "Mean error", "Center err mm", "Failed"
    ));
    for (truth, est, err, center, failed) in &rows {
        match (Summary::of(est), Summary::of(err), Summary::of(center)) {
            (Some(s), Some(e), Some(c)) => r.line(format!(
                "{:<10} {:>9.2} {:>9.2} {:>9.2} {:>9.2} {:>11.3} {:>14.3} {:>7}",
                format!("{truth:.0}"),
                s.average,
                s.median,
                s.max,
                s.min,
                e.average,
                c.average,
                failed.len()
            )),
            _ => r.line(format!("{:<10} {:>9} {:>9} {:>9} {:>9} {:>11} {:>14} {:>7}", format!("{truth:.0}"), "-", "-", "-", "-", "-", "-", failed.len())),
        }
    }
    Ok(Run { report: r, timing: timing_text("valve detection", &secs), artifacts: vec![] })
}

fn metrics_header() -> String {
    format!("{:<14} {:>9} {:>9} {:>9} {:>9}   {:>6} {:>6} {:>6} {:>6}", "Classifier", "Accuracy", "Precision", "Recall", "F2", "TP", "TN", "FP", "FN")
}

fn metrics_row(label: &str, m: &MetricsReport) -> String {
    format!(
        "{label:<14} {:>8.1}% {:>8.1}% {:>8.1}% {:>8.1}%   {:>6} {:>6} {:>6} {:>6}",
        100.0 * m.accuracy,
        100.0 * m.precision,
        100.0 * m.recall,
        100.0 * m.f2,
        m.tp,
        m.tn,
        m.fp,
        m.fn_
    )
}

fn kind_label(ctx: &Ctx) -> String {
    serde_json::to_value(ctx.settings.dataset.kind).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

fn train(ctx: &Ctx, a: &TrainArgs) -> Result<Run, CliError> {
    if ctx.common.out.is_none() {
        return Err(CliError::Usage("train needs --out".into()));
    }
    if !(a.train_fraction > 0.0 && a.train_fraction < 1.0) {
        return Err(CliError::Usage("--train-fraction must lie in (0, 1)".into()));
    }
    let s = &ctx.settings;
    let data = synthesize_dataset(&s.dataset, seed::derive(ctx.common.seed, "dataset"))?;
    let (results, secs) = timed_reps(ctx.common.reps, |rep| {
        let (tr, te) = data.split(a.train_fraction, ctx.rep_seed("split", rep));
        let mut cascade = train_cascade(&tr, &s.train, ctx.rep_seed("train", rep))?;
        let mut rounds = Vec::new();
        if a.mining_rounds > 0 {
            let (_, mined, log) =
                hard_negative_mine(&cascade, &tr, &tr.sources, a.mining_rounds, &s.train, &s.detect, ctx.rep_seed("mine", rep))?;
            cascade = mined;
            rounds = log;
        }
        let metrics = evaluate_cascade(&cascade, &te)?;
        Ok::<_, panelbot_core::Error>((cascade, rounds, metrics))
    });
    let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let mut r = ctx.header("train");
    r.field("positives", data.positives.len());
    r.field("negatives", data.negatives.len());
    r.field("train fraction", a.train_fraction);
    r.field("mining rounds", a.mining_rounds);
    r.section("stages");
    for (rep, (c, rounds, _)) in results.iter().enumerate() {
        let stumps: Vec<String> = c.stages.iter().map(|st| st.stumps.len().to_string()).collect();
        r.line(format!("rep {rep}: {} stages, stumps per stage [{}]", c.stages.len(), stumps.join(", ")));
        for (k, round) in rounds.iter().enumerate() {
            r.line(format!(
                "rep {rep} mining round {k}: false positives {} missed positives {} negatives {}",
                round.false_positives, round.missed_positives, round.negatives_after
            ));
        }
    }
    r.section("test split");
    r.line(metrics_header());
    let kind = kind_label(ctx);
    for (rep, (_, _, m)) in results.iter().enumerate() {
        r.line(metrics_row(&format!("{kind} {rep}"), m));
    }
    let f2: Vec<f64> = results.iter().map(|x| x.2.f2).collect();
    let f2s = Summary::of(&f2).expect("at least one rep");
    r.field("F2 average", format!("{:.4}", f2s.average));
    r.field("F2 minimum", format!("{:.4}", f2s.min));
    let json = results[0].0.to_json()?;
    r.field("cascade sha256", crate::report::sha256_hex(json.as_bytes()));
    Ok(Run { report: r, timing: timing_text("training", &secs), artifacts: vec![("cascade.json".into(), json.into_bytes())] })
}

fn evaluate(ctx: &Ctx) -> Result<Run, CliError> {
    let cascade = ctx.cascade("evaluate")?;
    let (results, secs) = timed_reps(ctx.common.reps, |rep| {
        let probe = synthesize_dataset(&ctx.settings.dataset, ctx.rep_seed("probe", rep))?;
        evaluate_cascade(cascade, &probe)
    });
    let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let mut r = ctx.header("evaluate");
    r.section("probe sets");
    r.line(metrics_header());
    let kind = kind_label(ctx);
    for (rep, m) in results.iter().enumerate() {
        r.line(metrics_row(&format!("{kind} {rep}"), m));
    }
    Ok(Run { report: r, timing: timing_text("evaluation", &secs), artifacts: vec![] })
}

fn mission(ctx: &Ctx, a: &CascadeArgs) -> Result<Run, CliError> {
    let s = &ctx.settings;
    let locator = match &ctx.cascade {
        Some(c) => HeadLocator::Cascade(c, s.detect),
        None => HeadLocator::Truth,
    };
    let (results, secs) = timed_reps(ctx.common.reps, |rep| {
        let sc = match &ctx.scenario {
            Some(sc) => sc.clone(),
            None => apply_scenario(&generate_scenario(&s.gen, ctx.rep_seed("scenario", rep))?, &ctx.overrides)?,
        };
        Ok::<_, CliError>(run_mission(&sc, &s.mission, locator, ctx.rep_seed("mission", rep))?)
    });
    let reports = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let mut r = ctx.header("run-mission");
    r.field("head locator", if a.cascade.is_some() { "cascade" } else { "projected truth" });
    r.field("scenario source", if ctx.scenario.is_some() { "file" } else { "generated per rep" });
    r.section("outcomes");
    r.push_block(&MissionSummary::of(&reports).to_text());
    let grasp: Vec<f64> = reports.iter().filter_map(|m| m.grasp_error_mm).collect();
    let valve: Vec<f64> = reports.iter().filter_map(|m| m.valve_angle_error_deg).collect();
    r.line(stats_header(""));
    if let Some(g) = Summary::of(&grasp) {
        r.line(stats_row("grasp err mm", &g, 3));
    }
    if let Some(v) = Summary::of(&valve) {
        r.line(stats_row("valve err deg", &v, 3));
    }
    for (rep, m) in reports.iter().enumerate() {
        r.section(&format!("mission {rep}"));
        r.push_block(&m.to_text());
    }
    Ok(Run { report: r, timing: timing_text("mission", &secs), artifacts: vec![] })
}

pub(crate) fn replay(a: &ReplayArgs) -> Result<Outcome, CliError> {
    let manifest = Manifest::load(&a.manifest)?;
    for input in &manifest.inputs {
        let now = file_sha256(&input.path)?;
        if now != input.sha256 {
            return Err(CliError::Mismatch(format!("{} {} changed since the recorded run", input.role, input.path.display())));
        }
    }
    let mut command = manifest.command.clone();
    if matches!(command, Command::Replay(_)) {
        return Err(CliError::Usage("a replay manifest cannot be replayed".into()));
    }
    if let Some(c) = command.common_mut() {
        c.out = a.out.clone();
    }
    let rerun = execute(&command)?;
    let fresh = rerun.manifest.as_ref().expect("pipeline commands produce a manifest");
    let mut r = Report::new("replay", manifest.seed);
    r.field("replayed command", command.name());
    r.section("artifacts");
    r.line(format!("{:<16} {:<8} sha256", "name", "status"));
    let mut mismatch = fresh.artifacts.len() != manifest.artifacts.len();
    for want in &manifest.artifacts {
        let got = fresh.artifacts.iter().find(|g| g.name == want.name);
        let same = got.is_some_and(|g| g.sha256 == want.sha256);
        mismatch |= !same;
        r.line(format!("{:<16} {:<8} {}", want.name, if same { "match" } else { "differs" }, got.map_or("-", |g| &g.sha256)));
    }
    if fresh.parameters != manifest.parameters {
        mismatch = true;
        r.line("parameters differ");
    }
    r.field("result", if mismatch { "differs" } else { "identical" });
    let mut artifacts = rerun.artifacts;
    artifacts.push(("replayed-report.txt".into(), rerun.report.into_bytes()));
    Ok(Outcome { report: r.into_string(), timing: rerun.timing, artifacts, manifest: None, mismatch })
}

#[cfg(test)]
mod tests {
    use super::*;
    use panelbot_core::geometry::wrap_deg;

    #[test]
    fn quarter_unwrap() {
        assert_eq!(unwrap_quarter(89.5, 0.0), -0.5);
        assert_eq!(unwrap_quarter(0.5, 45.0), 0.5);
        assert!((unwrap_quarter(44.0, 45.0) - 44.0).abs() < 1e-12);
        assert!((wrap_deg(unwrap_quarter(1.0, 88.0)) - 91.0).abs() < 1e-12);
    }
}
