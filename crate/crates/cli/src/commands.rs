//! Subcommand bodies. Each writes under its output directory and returns
//! what the manifest should record.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ndarray::{s, Array4, Axis};
use serde::de::DeserializeOwned;
use serde_json::json;

use vidctl_core::data::io::{read_png, read_pngs, read_sample, scene_dir_name, scene_dirs, write_pngs, write_sample};
use vidctl_core::data::{generate_scene, EdgeParams, SceneSampler, SceneSpec};
use vidctl_core::diffusion::{DiffusionSchedule, GuidanceConfig, GuidanceMode};
use vidctl_core::metrics::{evaluate_video, summarize, AttributeClassifier};
use vidctl_core::noise_init::init_noise;
use vidctl_core::pipeline::{
    ablate_threshold, derive_seed, frame_grid, train as train_model, Dataset, LongVideo, MaskSource, SampleRequest, Sampler,
    TrainConfig, Trainer, VideoModel,
};

use crate::manifest::write_atomic;
use crate::{user_error, AblateArgs, EvaluateArgs, GuidanceArg, GuidanceArgs, InspectNoiseArgs, MakeDataArgs, Outcome,
    SampleArgs, SampleLongArgs, TrainArgs};

/// Parses a JSON config, naming the offending key on failure.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| user_error(format!("cannot read config {}: {e}", path.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        user_error(format!("invalid config key `{key}` in {}: {}", path.display(), e.inner()))
    })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())
}

pub fn make_data(a: &MakeDataArgs) -> Result<Outcome> {
    let mut inputs = Vec::new();
    let sampler = match &a.sampler {
        Some(p) => {
            inputs.push(p.clone());
            load_config::<SceneSampler>(p)?
        }
        None => {
            let mut s = SceneSampler::new(a.frames, a.size, a.size);
            s.render.sensor_noise = a.sensor_noise;
            s.render.antialias = a.antialias;
            s
        }
    };
    if a.count == 0 {
        return Err(user_error("--count must be at least 1"));
    }
    for i in 0..a.count {
        let spec = SceneSpec::sample(&sampler, derive_seed(a.seed, i as u64));
        let sample = generate_scene(&spec)?;
        write_sample(&a.out.out.join(scene_dir_name(i)), &sample)?;
    }
    let config = json!({ "sampler": sampler, "count": a.count, "seed": a.seed });
    write_json(&a.out.out.join("dataset.json"), &config)?;
    log::info!("wrote {} scenes to {}", a.count, a.out.out.display());
    Ok(Outcome {
        config,
        seeds: vec![a.seed],
        inputs,
    })
}

fn write_log_csv(path: &Path, trainer: &Trainer) -> Result<()> {
    let mut text = String::from("step,kind,loss,ema\n");
    for l in trainer.log() {
        text.push_str(&format!("{},{:?},{},{}\n", l.step, l.kind, l.loss, l.ema));
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn train_cmd_config(a: &TrainArgs) -> Result<TrainConfig> {
    let config = match &a.config {
        Some(p) => load_config::<TrainConfig>(p)?,
        None => TrainConfig::default(),
    };
    config.validate()?;
    Ok(config)
}

pub fn train(a: &TrainArgs) -> Result<Outcome> {
    let config = train_cmd_config(a)?;
    let dataset = Dataset::load(&a.data)?;
    let ckpt = a.out.out.join("checkpoint");
    let trainer = if a.resume && ckpt.join("trainer.json").exists() {
        let mut t = Trainer::resume(&ckpt, dataset)?;
        if t.config() != &config {
            return Err(user_error("--resume: config differs from the checkpoint's training config"));
        }
        t.run(None, Some(&ckpt))?;
        t
    } else {
        train_model(&config, dataset, Some(&ckpt))?
    };
    write_log_csv(&a.out.out.join("loss.csv"), &trainer)?;
    let mut inputs = vec![a.data.clone()];
    inputs.extend(a.config.clone());
    Ok(Outcome {
        config: serde_json::to_value(&config)?,
        seeds: vec![config.seed],
        inputs,
    })
}

fn guidance_config(g: &GuidanceArgs) -> GuidanceConfig {
    GuidanceConfig {
        text_scale: g.wt,
        video_scale: g.wv,
        mode: match g.guidance {
            GuidanceArg::Dual => GuidanceMode::Dual,
            GuidanceArg::TextOnly => GuidanceMode::TextOnly,
        },
    }
}

fn sampler_with_steps<'a>(model: &'a VideoModel, steps: Option<usize>) -> Result<Sampler<'a>> {
    let mut sampler = model.sampler();
    if let Some(s) = steps {
        let mut cfg = model.config().schedule.clone();
        cfg.sampling_steps = s;
        sampler.schedule = DiffusionSchedule::new(&cfg)?;
    }
    Ok(sampler)
}

fn load_model(path: &Path) -> Result<VideoModel> {
    VideoModel::load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

struct SampleJob<'a> {
    out: &'a Path,
    checkpoint: &'a Path,
    prompt: &'a str,
    controls: &'a Path,
    first_frame: Option<&'a PathBuf>,
    source_video: Option<&'a PathBuf>,
    iterations: usize,
    frames: Option<usize>,
    guidance: &'a GuidanceArgs,
}

fn write_long_video(out: &Path, video: &LongVideo) -> Result<()> {
    write_pngs(&out.join("frames"), "frame", &video.frames)?;
    write_pngs(out, "first_frame", &video.first_frame.clone().insert_axis(Axis(0)))?;
    let stats: Vec<_> = video.iterations.iter().map(|it| it.noise.stats()).collect();
    write_json(&out.join("noise.json"), &stats)
}

fn run_sample(job: SampleJob<'_>) -> Result<Outcome> {
    let model = load_model(job.checkpoint)?;
    let kind = model.config().control;
    let controls = read_pngs(job.controls, kind.file_prefix(), 1)?;
    let frames = match (job.iterations, job.frames) {
        (1, None) => controls.shape()[0],
        (_, Some(f)) => f,
        (_, None) => 8,
    };
    let mut req = SampleRequest::new(job.prompt, controls, job.guidance.seed);
    req.iterations = job.iterations;
    req.frames_per_iteration = frames;
    req.threshold = job.guidance.thres;
    req.guidance = guidance_config(job.guidance);
    let needed = req.required_controls();
    if req.controls.shape()[0] < needed {
        return Err(user_error(format!(
            "{} control maps in {}; {} iterations of {frames} frames need {needed}",
            req.controls.shape()[0],
            job.controls.display(),
            job.iterations
        )));
    }
    req.controls = req.controls.slice(s![..needed, .., .., ..]).to_owned();
    let mut inputs = vec![job.checkpoint.to_path_buf(), job.controls.to_path_buf()];
    if let Some(p) = job.first_frame {
        req.first_frame = Some(read_png(p, 3)?);
        inputs.push(p.clone());
    }
    if let Some(p) = job.source_video {
        let v = read_pngs(p, "frame", 3)?;
        if v.shape()[0] < needed {
            return Err(user_error(format!("source video has {} frames, need {needed}", v.shape()[0])));
        }
        req.mask_source = MaskSource::Video(v.slice(s![..needed, .., .., ..]).to_owned());
        inputs.push(p.clone());
    }
    let sampler = sampler_with_steps(&model, job.guidance.steps)?;
    let video = sampler.long(&req)?;
    write_long_video(job.out, &video)?;
    let seeds = (0..job.iterations).map(|k| vidctl_core::pipeline::iteration_seed(job.guidance.seed, k)).collect();
    Ok(Outcome {
        config: json!({
            "prompt": job.prompt,
            "iterations": job.iterations,
            "frames_per_iteration": frames,
            "threshold": req.threshold,
            "guidance": req.guidance,
            "sampling_steps": sampler.schedule.sampling_steps,
            "mask_source": if job.source_video.is_some() { "video" } else { "controls" },
            "user_first_frame": job.first_frame.is_some(),
        }),
        seeds,
        inputs,
    })
}

pub fn sample(a: &SampleArgs) -> Result<Outcome> {
    run_sample(SampleJob {
        out: &a.out.out,
        checkpoint: &a.checkpoint,
        prompt: &a.prompt,
        controls: &a.controls,
        first_frame: a.first_frame.as_ref(),
        source_video: a.source_video.as_ref(),
        iterations: 1,
        frames: a.frames,
        guidance: &a.guidance,
    })
}

pub fn sample_long(a: &SampleLongArgs) -> Result<Outcome> {
    run_sample(SampleJob {
        out: &a.out.out,
        checkpoint: &a.checkpoint,
        prompt: &a.prompt,
        controls: &a.controls,
        first_frame: a.first_frame.as_ref(),
        source_video: a.source_video.as_ref(),
        iterations: a.iterations,
        frames: Some(a.frames),
        guidance: &a.guidance,
    })
}

pub fn inspect_noise(a: &InspectNoiseArgs) -> Result<Outcome> {
    let video = read_pngs(&a.video, &a.prefix, 3)?;
    let noise = init_noise(video.view(), a.thres, a.seed, a.latent_channels, a.factor)?;
    let masks: Array4<f32> = noise.masks.masks.mapv(f32::from);
    write_pngs(&a.out.out.join("masks"), "mask", &masks)?;
    let stats = noise.stats();
    write_json(&a.out.out.join("noise_stats.json"), &stats)?;
    println!("{}", serde_json::to_string_pretty(&stats)?);
    Ok(Outcome {
        config: json!({ "threshold": a.thres, "factor": a.factor, "latent_channels": a.latent_channels, "prefix": a.prefix }),
        seeds: vec![a.seed],
        inputs: vec![a.video.clone()],
    })
}

pub fn evaluate(a: &EvaluateArgs) -> Result<Outcome> {
    let model = load_model(&a.checkpoint)?;
    let kind = model.config().control;
    let mut dirs = scene_dirs(&a.data)?;
    if let Some(n) = a.limit {
        dirs.truncate(n);
    }
    if dirs.is_empty() {
        return Err(user_error(format!("no scene_* directories in {}", a.data.display())));
    }
    let classifier = match &a.classifier {
        Some(p) => Some(AttributeClassifier::load(p)?),
        None => None,
    };
    let sampler = sampler_with_steps(&model, a.guidance.steps)?;
    let guidance = guidance_config(&a.guidance);
    let mut evals = Vec::with_capacity(dirs.len());
    let mut seeds = Vec::with_capacity(dirs.len());
    for (i, dir) in dirs.iter().enumerate() {
        let scene = read_sample(dir)?;
        let name = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let seed = derive_seed(a.guidance.seed, i as u64);
        let mut req = SampleRequest::new(&scene.caption, kind.select(&scene).clone(), seed);
        req.threshold = a.guidance.thres;
        req.guidance = guidance.clone();
        let video = sampler.long(&req)?;
        write_pngs(&a.out.out.join("videos").join(&name), "frame", &video.frames)?;
        evals.push(evaluate_video(&name, &video.frames, &scene, classifier.as_ref(), &EdgeParams::default())?);
        seeds.push(seed);
        log::info!("evaluated {name}");
    }
    let config = json!({
        "threshold": a.guidance.thres,
        "guidance": guidance,
        "sampling_steps": sampler.schedule.sampling_steps,
        "scenes": dirs.len(),
    });
    let report = summarize(evals, config.clone())?;
    write_json(&a.out.out.join("report.json"), &report)?;
    println!(
        "depth_error {:.4}  edge_f1 {:.4}  flicker {}",
        report.depth_error,
        report.edge_f1,
        report.flicker.map_or("n/a".into(), |f| format!("{f:.4}"))
    );
    let mut inputs = vec![a.checkpoint.clone(), a.data.clone()];
    inputs.extend(a.classifier.clone());
    Ok(Outcome { config, seeds, inputs })
}

pub fn ablate(a: &AblateArgs) -> Result<Outcome> {
    if a.seeds == 0 {
        return Err(user_error("--seeds must be at least 1"));
    }
    let model = load_model(&a.checkpoint)?;
    let scene = read_sample(&a.scene)?;
    let sampler = sampler_with_steps(&model, a.steps)?;
    let guidance = GuidanceConfig {
        text_scale: a.wt,
        video_scale: a.wv,
        mode: GuidanceMode::Dual,
    };
    let mut per_seed = Vec::new();
    let mut sums = vec![0.0; a.thresholds.len()];
    let seeds: Vec<u64> = (0..a.seeds).map(|k| a.seed + k).collect();
    for &seed in &seeds {
        let ab = ablate_threshold(&sampler, &scene, model.config().control, &a.thresholds, &guidance, seed)?;
        let grid = frame_grid(&ab.videos)?;
        write_pngs(&a.out.out, &format!("grid_seed{seed}"), &grid.insert_axis(Axis(0)))?;
        for (s, r) in sums.iter_mut().zip(&ab.results) {
            *s += r.flicker;
        }
        per_seed.push(json!({ "seed": seed, "results": ab.results }));
    }
    let mean: Vec<_> = a
        .thresholds
        .iter()
        .zip(&sums)
        .map(|(t, s)| json!({ "threshold": t, "mean_flicker": s / seeds.len() as f64 }))
        .collect();
    let report = json!({ "thresholds": a.thresholds, "mean": mean, "per_seed": per_seed });
    write_json(&a.out.out.join("report.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report["mean"])?);
    Ok(Outcome {
        config: json!({ "thresholds": a.thresholds, "guidance": guidance, "sampling_steps": sampler.schedule.sampling_steps }),
        seeds,
        inputs: vec![a.checkpoint.clone(), a.scene.clone()],
    })
}
