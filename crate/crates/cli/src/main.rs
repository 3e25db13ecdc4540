use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use vistrack::annotation::{self, AnnotationFile, VideoRecord};
use vistrack::config::RunConfig;
use vistrack::datagen::{self, AffineAugConfig, Layout, SynthConfig};
use vistrack::detector::ProposalMode;
use vistrack::eval::{evaluate, EvalConfig, EvalResult};
use vistrack::pipeline::{run_dataset, ModelParams};
use vistrack::render::{draw_overlays, Overlay};
use vistrack::selftest::{self, CheckKind, SelftestOptions};
use vistrack::train::train;
use vistrack::video::{Frame, FrameObject, InstanceTrack, VideoAnnotation};

#[derive(Parser)]
#[command(name = "vistrack", version, about = "Video instance tracking with attention-aggregated features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Optionally train, then track every video of a dataset.
    Run(RunArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Run gradient checks and oracle equivalences.
    Selftest(SelftestArgs),
    /// Draw masks and boxes over the frames of one video.
    Render(RenderArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum LayoutArg {
    Random,
    Crossing,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    videos: usize,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    /// Frame size as HxW.
    #[arg(long, default_value = "96x96", value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long, default_value_t = 2)]
    objects: usize,
    #[arg(long, env = "VISTRACK_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = LayoutArg::Random)]
    layout: LayoutArg,
    /// Give every object of a video the same shape, size and color.
    #[arg(long)]
    identical: bool,
    /// Speed range in pixels per frame as LO,HI.
    #[arg(long, value_parser = parse_range)]
    speed: Option<(f64, f64)>,
    /// Build one pseudo-video from a still PPM image and its annotation file.
    #[arg(long, num_args = 2, value_names = ["IMG", "ANN"])]
    from_still: Option<Vec<PathBuf>>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProposalArg {
    Oracle,
    Blob,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    proposals: Option<ProposalArg>,
    /// Training steps before inference; overrides the config.
    #[arg(long)]
    train: Option<usize>,
    /// Only past frames serve as support frames.
    #[arg(long)]
    strict_causal: bool,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Overrides the model and training seeds of the config.
    #[arg(long, env = "VISTRACK_SEED")]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Comma-separated IoU thresholds.
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    /// Result file; defaults to PRED with the extension `.eval.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SelftestArgs {
    /// Run the gradient-check suites (always on; kept for scripts).
    #[arg(long)]
    gradcheck: bool,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    #[arg(long)]
    module: Option<String>,
    #[arg(long, hide = true)]
    corrupt_backward: bool,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    data: PathBuf,
    /// Predictions to draw; ground truth when omitted.
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    video: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
}

#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug)]
struct CheckFailure(String);

impl fmt::Display for CheckFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailure {}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((p(h)?, p(w)?))
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected LO,HI, got {s:?}"))?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
    Ok((p(a)?, p(b)?))
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    if e.downcast_ref::<CheckFailure>().is_some() {
        return 3;
    }
    match e.downcast_ref::<vistrack::Error>() {
        Some(vistrack::Error::Numerical { .. }) => 3,
        _ => 2,
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
fn run_cli<I, A>(args: I) -> u8
where
    I: IntoIterator<Item = A>,
    A: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return u8::from(e.use_stderr());
        }
    };
    let r = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Run(a) => cmd_run(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Selftest(a) => cmd_selftest(a),
        Command::Render(a) => cmd_render(a),
    };
    match r {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(run_cli(std::env::args_os()))
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let videos = match &a.from_still {
        Some(paths) => vec![still_video(&paths[0], &paths[1], a.frames, a.seed)?],
        None => {
            let base = SynthConfig::default();
            let cfg = SynthConfig {
                num_videos: a.videos,
                frames_per_video: a.frames,
                height: a.size.0,
                width: a.size.1,
                objects_per_video: a.objects,
                speed_range: a.speed.unwrap_or(base.speed_range),
                layout: match a.layout {
                    LayoutArg::Random => Layout::Random,
                    LayoutArg::Crossing => Layout::Crossing,
                },
                identical_appearance: a.identical,
                seed: a.seed,
                ..base
            };
            cfg.validate().map_err(|e| UsageError(e.to_string()))?;
            datagen::gen_dataset(&cfg)?
        }
    };
    annotation::write_dataset(&a.out, &videos).with_context(|| format!("writing dataset to {}", a.out.display()))?;
    let frames: usize = videos.iter().map(|v| v.frames.len()).sum();
    println!("wrote {} videos, {} frames to {}", videos.len(), frames, a.out.display());
    Ok(())
}

fn still_video(img: &Path, ann: &Path, frames: usize, seed: u64) -> Result<vistrack::video::Video> {
    let pixels = annotation::read_ppm(img)?;
    let anns = AnnotationFile::read(ann)?.to_annotations()?;
    let first = anns
        .first()
        .ok_or_else(|| vistrack::Error::Data(format!("{} has no videos", ann.display())))?;
    if (first.height, first.width) != (pixels.dim(1), pixels.dim(2)) {
        return Err(vistrack::Error::Data(format!(
            "annotation size {}x{} differs from image {}x{}",
            first.height,
            first.width,
            pixels.dim(1),
            pixels.dim(2)
        ))
        .into());
    }
    let objects: Vec<FrameObject> = first.frame_objects(0);
    let still = Frame::new(pixels, 0, first.video_id)?;
    let cfg = AffineAugConfig {
        frames,
        seed,
        ..AffineAugConfig::default()
    };
    Ok(datagen::augment_still(&still, &objects, &cfg)?)
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let mut cfg = RunConfig::read(&a.config).with_context(|| format!("reading config {}", a.config.display()))?;
    if let Some(p) = a.proposals {
        cfg.pipeline.proposal_mode = match p {
            ProposalArg::Oracle => ProposalMode::Oracle,
            ProposalArg::Blob => ProposalMode::Blob,
        };
    }
    if let Some(s) = a.train {
        cfg.train.steps = s;
    }
    if a.strict_causal {
        cfg.pipeline.strict_causal = true;
    }
    if let Some(s) = a.seed {
        cfg.pipeline.seed = s;
        cfg.train.seed = s;
    }
    if a.jobs == 0 {
        return Err(UsageError("--jobs must be at least 1".into()).into());
    }
    cfg.validate()?;
    let videos = annotation::read_dataset(&a.data).with_context(|| format!("reading dataset {}", a.data.display()))?;

    let mut params = ModelParams::<f64>::new(&cfg.pipeline, cfg.pipeline.seed)?;
    if cfg.train.steps > 0 {
        let history = train(&mut params, &videos, &cfg.pipeline, &cfg.train)?;
        if let (Some(f), Some(l)) = (history.first(), history.last()) {
            eprintln!("trained {} steps: loss {:.4} -> {:.4}", history.len(), f.total, l.total);
        }
    }
    let with_gt = cfg.pipeline.proposal_mode == ProposalMode::Oracle;
    let results = run_dataset(&videos, with_gt, &cfg.pipeline, &params, a.jobs)?;
    let records: Vec<VideoRecord> = videos.iter().map(|v| annotation::video_record(&v.annotation)).collect();
    let tracks: Vec<InstanceTrack> = results.into_iter().flat_map(|r| r.tracks).collect();
    AnnotationFile::from_predictions(&records, &tracks)
        .write(&a.out)
        .with_context(|| format!("writing predictions {}", a.out.display()))?;
    println!("wrote {} tracks over {} videos to {}", tracks.len(), videos.len(), a.out.display());
    Ok(())
}

fn check_same_videos(pred: &[VideoAnnotation], gt: &[VideoAnnotation]) -> Result<()> {
    let p: BTreeSet<u64> = pred.iter().map(|v| v.video_id).collect();
    let g: BTreeSet<u64> = gt.iter().map(|v| v.video_id).collect();
    if p == g {
        return Ok(());
    }
    let only_pred: Vec<u64> = p.difference(&g).copied().collect();
    let only_gt: Vec<u64> = g.difference(&p).copied().collect();
    Err(vistrack::Error::Data(format!(
        "video ids differ: only in predictions {only_pred:?}, only in ground truth {only_gt:?}"
    ))
    .into())
}

fn result_document(r: &EvalResult) -> serde_json::Value {
    serde_json::json!({
        "AP": r.mean_ap,
        "AP50": r.ap50,
        "AP75": r.ap75,
        "AR1": r.ar(1),
        "AR10": r.ar(10),
        "iou_thresholds": r.iou_thresholds,
        "categories": r.categories,
        "ap_per_category_per_threshold": r.ap_per_category_per_threshold,
    })
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let pred = AnnotationFile::read(&a.pred)
        .and_then(|f| f.to_annotations())
        .with_context(|| format!("reading predictions {}", a.pred.display()))?;
    let gt = AnnotationFile::read(&a.gt)
        .and_then(|f| f.to_annotations())
        .with_context(|| format!("reading ground truth {}", a.gt.display()))?;
    check_same_videos(&pred, &gt)?;
    let mut cfg = EvalConfig::default();
    if let Some(t) = a.thresholds {
        cfg.iou_thresholds = t;
    }
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    let preds: Vec<InstanceTrack> = pred.into_iter().flat_map(|v| v.tracks).collect();
    let gts: Vec<InstanceTrack> = gt.into_iter().flat_map(|v| v.tracks).collect();
    let r = evaluate(&preds, &gts, &cfg)?;
    println!("AP    {:.4}", r.mean_ap);
    println!("AP50  {}", fmt_metric(r.ap50));
    println!("AP75  {}", fmt_metric(r.ap75));
    println!("AR1   {}", fmt_metric(r.ar(1)));
    println!("AR10  {}", fmt_metric(r.ar(10)));
    let out = a.out.unwrap_or_else(|| a.pred.with_extension("eval.json"));
    let text = serde_json::to_string_pretty(&result_document(&r))? + "\n";
    std::fs::write(&out, text).with_context(|| format!("writing result {}", out.display()))?;
    Ok(())
}

fn cmd_selftest(a: SelftestArgs) -> Result<()> {
    let opts = SelftestOptions {
        eps: a.eps,
        tolerance: a.tolerance,
        module: a.module,
        corrupt_backward: a.corrupt_backward,
    };
    let results = selftest::run(&opts).map_err(|e| UsageError(e.to_string()))?;
    let mut failed = Vec::new();
    for c in &results {
        let kind = match c.kind {
            CheckKind::Gradient => "grad",
            CheckKind::Oracle => "oracle",
        };
        let status = if c.passed() { "PASS" } else { "FAIL" };
        println!("{status} {:<12} {:<32} {kind:<6} error {:.3e} (tol {:.0e})", c.module, c.name, c.error, c.tolerance);
        if !c.passed() {
            failed.push(format!("{}::{} error {:.3e}", c.module, c.name, c.error));
        }
    }
    println!("{} checks, {} failed", results.len(), failed.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CheckFailure(format!("failing checks: {}", failed.join(", "))).into())
    }
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    let videos = annotation::read_dataset(&a.data)?;
    let video = videos
        .iter()
        .find(|v| v.annotation.video_id == a.video)
        .ok_or_else(|| anyhow!(vistrack::Error::Data(format!("video {} not in {}", a.video, a.data.display()))))?;
    let ann = match &a.pred {
        Some(p) => AnnotationFile::read(p)?
            .to_annotations()?
            .into_iter()
            .find(|v| v.video_id == a.video)
            .ok_or_else(|| vistrack::Error::Data(format!("video {} not in {}", a.video, p.display())))?,
        None => video.annotation.clone(),
    };
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for f in &video.frames {
        let objs = ann.frame_objects(f.index);
        let overlays: Vec<Overlay> = objs
            .iter()
            .map(|o| Overlay {
                identity: o.identity,
                mask: &o.mask,
                bbox: o.bbox,
            })
            .collect();
        let img = draw_overlays(&f.pixels, &overlays, a.alpha).map_err(|e| UsageError(e.to_string()))?;
        annotation::write_ppm(&a.out.join(format!("{:04}.ppm", f.index)), &img)?;
    }
    println!("wrote {} frames to {}", video.frames.len(), a.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    fn cli(args: &[&str]) -> u8 {
        run_cli(std::iter::once("vistrack").chain(args.iter().copied()))
    }

    fn p(path: &Path) -> &str {
        path.to_str().unwrap()
    }

    fn gen(out: &Path, extra: &[&str]) -> u8 {
        let mut args = vec!["gen", "--out", p(out), "--videos", "2", "--frames", "8", "--size", "48x48"];
        args.extend_from_slice(extra);
        if !extra.contains(&"--seed") {
            args.extend_from_slice(&["--seed", "0"]);
        }
        cli(&args)
    }

    fn default_config() -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.json")
    }

    fn files(root: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in std::fs::read_dir(d).unwrap() {
                let path = e.unwrap().path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    out.push(path);
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn gen_writes_frames_and_one_annotation_file_reproducibly() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        assert_eq!(gen(&a, &["--seed", "11"]), 0);
        assert_eq!(gen(&b, &["--seed", "11"]), 0);
        let fa = files(&a);
        assert_eq!(fa.iter().filter(|f| f.extension().is_some_and(|e| e == "ppm")).count(), 16);
        assert_eq!(fa.iter().filter(|f| f.extension().is_some_and(|e| e == "json")).count(), 1);
        let fb = files(&b);
        assert_eq!(fa.len(), fb.len());
        for (x, y) in fa.iter().zip(&fb) {
            assert_eq!(x.strip_prefix(&a).unwrap(), y.strip_prefix(&b).unwrap());
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{}", x.display());
        }
    }

    #[test]
    fn seeds_fall_back_to_the_environment() {
        let cmd = Cli::command();
        for sub in ["gen", "run"] {
            let seed = cmd
                .find_subcommand(sub)
                .unwrap()
                .get_arguments()
                .find(|a| a.get_id() == "seed")
                .unwrap();
            assert_eq!(seed.get_env(), Some(std::ffi::OsStr::new("VISTRACK_SEED")), "{sub}");
        }
    }

    #[test]
    fn exit_codes() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(cli(&["--help"]), 0);
        assert_eq!(cli(&["gen"]), 1);
        assert_eq!(cli(&["no-such-command"]), 1);
        assert_eq!(cli(&["eval", "--pred", "x.json", "--gt", "y.json"]), 2);

        let missing = dir.path().join("missing");
        let cfg = default_config();
        let out = dir.path().join("pred.json");
        assert_eq!(cli(&["run", "--data", p(&missing), "--config", p(&cfg), "--out", p(&out)]), 2);

        let data = dir.path().join("data");
        assert_eq!(gen(&data, &[]), 0);
        let bad = dir.path().join("bad.json");
        std::fs::write(&bad, r#"{"pipeline": {"no_such_key": 1}}"#).unwrap();
        assert_eq!(cli(&["run", "--data", p(&data), "--config", p(&bad), "--out", p(&out)]), 2);

        let ann = data.join("annotations.json");
        assert_eq!(cli(&["eval", "--pred", p(&ann), "--gt", p(&ann), "--thresholds", "0.5,1.5"]), 1);
    }

    #[test]
    fn eval_of_ground_truth_against_itself_is_perfect() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        assert_eq!(gen(&data, &["--objects", "1"]), 0);
        let ann = data.join("annotations.json");
        let res = dir.path().join("res.json");
        assert_eq!(cli(&["eval", "--pred", p(&ann), "--gt", p(&ann), "--out", p(&res)]), 0);
        let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&res).unwrap()).unwrap();
        for key in ["AP", "AP50", "AP75", "AR1", "AR10"] {
            assert_eq!(doc[key].as_f64(), Some(1.0), "{key}");
        }
        assert_eq!(doc["iou_thresholds"].as_array().unwrap().len(), 10);
    }

    #[test]
    fn eval_result_defaults_next_to_the_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        assert_eq!(gen(&data, &[]), 0);
        let pred = dir.path().join("pred.json");
        std::fs::copy(data.join("annotations.json"), &pred).unwrap();
        assert_eq!(cli(&["eval", "--pred", p(&pred), "--gt", p(&data.join("annotations.json"))]), 0);
        assert!(dir.path().join("pred.eval.json").exists());
    }

    #[test]
    fn eval_rejects_mismatched_video_sets() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        assert_eq!(gen(&a, &[]), 0);
        assert_eq!(cli(&["gen", "--out", p(&b), "--videos", "3", "--frames", "2", "--size", "48x48", "--seed", "0"]), 0);
        let pa = AnnotationFile::read(&a.join("annotations.json")).unwrap().to_annotations().unwrap();
        let pb = AnnotationFile::read(&b.join("annotations.json")).unwrap().to_annotations().unwrap();
        let err = check_same_videos(&pa, &pb).unwrap_err();
        assert!(err.to_string().contains("[3]"), "{err}");
        assert_eq!(exit_code(&err), 2);
        let r = cli(&["eval", "--pred", p(&a.join("annotations.json")), "--gt", p(&b.join("annotations.json"))]);
        assert_eq!(r, 2);
    }

    #[test]
    fn selftest_filter_and_negative_control() {
        assert_eq!(cli(&["selftest", "--gradcheck", "--module", "attention"]), 0);
        assert_eq!(cli(&["selftest", "--gradcheck", "--corrupt-backward"]), 3);
        assert_eq!(cli(&["selftest", "--module", "nope"]), 1);
    }

    #[test]
    fn run_then_render() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        assert_eq!(gen(&data, &[]), 0);
        let cfg = default_config();
        let pred = dir.path().join("pred.json");
        assert_eq!(cli(&["run", "--data", p(&data), "--config", p(&cfg), "--out", p(&pred), "--seed", "0"]), 0);
        let frames = dir.path().join("render");
        assert_eq!(cli(&["render", "--data", p(&data), "--pred", p(&pred), "--video", "1", "--out", p(&frames)]), 0);
        assert_eq!(files(&frames).len(), 8);
    }
}
