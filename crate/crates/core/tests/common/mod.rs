//! Trained toy model shared by the integration tests; built once and cached
//! under the cargo target tmpdir.

#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;

use invedit_core::denoiser::TrainOptions;
use invedit_core::pipeline::{training_examples, DEFAULT_EDGE_THRESHOLD};
use invedit_core::synth_data::{make_split, Dataset};
use invedit_core::*;

pub struct Fixture {
    pub data: Dataset,
    /// Per-epoch training losses, saved next to the cached weights.
    pub epoch_losses: Vec<f64>,
    pub codec: LatentCodec,
    pub model: ToyDenoiser,
    pub schedule: NoiseSchedule,
}

pub const DATA_SEED: u64 = 7;

fn env_usize(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

pub fn fixture_config() -> DenoiserConfig {
    DenoiserConfig {
        widths: [16, 32, 64],
        res_kernel: env_usize("FIXTURE_KERNEL", 3),
        ..Default::default()
    }
}

pub fn train_options() -> TrainOptions {
    TrainOptions {
        epochs: env_usize("FIXTURE_EPOCHS", TrainOptions::default().epochs),
        ..Default::default()
    }
}

fn cache_dir(n_train: usize, opts: &TrainOptions) -> PathBuf {
    let tag = format!(
        "fixture-s{DATA_SEED}-n{n_train}-e{}-b{}-lr{}-w{:?}-k{}",
        opts.epochs,
        opts.batch_size,
        opts.learning_rate,
        fixture_config().widths,
        fixture_config().res_kernel
    );
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(tag.replace(['[', ']', ' ', ','], ""))
}

fn build() -> Fixture {
    let n_train = env_usize("FIXTURE_TRAIN", 1024);
    let data = make_split(DATA_SEED, n_train, 32).expect("split");
    let images: Vec<ImageTensor> = data
        .train
        .iter()
        .map(|s| invedit_core::synth_data::render_scene(s).image)
        .collect();
    let mut codec = LatentCodec::space_to_depth(images[0].shape(), 2).expect("codec");
    codec.fit_stats(&images).expect("stats");
    let schedule = ScheduleConfig::default().build().expect("schedule");
    let opts = train_options();
    let dir = cache_dir(n_train, &opts);
    let losses_path = dir.join("epoch_losses.json");
    let cached = ToyDenoiser::load(&dir).and_then(|m| {
        let losses = std::fs::read(&losses_path).map_err(|e| Error::io(&losses_path, e))?;
        Ok((m, serde_json::from_slice::<Vec<f64>>(&losses)?))
    });
    let (model, epoch_losses) = match cached {
        Ok(pair) => pair,
        Err(_) => {
            let examples = training_examples(&data.train, &codec, DEFAULT_EDGE_THRESHOLD).expect("examples");
            let mut model = ToyDenoiser::new(fixture_config(), 0).expect("model");
            let start = std::time::Instant::now();
            let report = model.train(&examples, &schedule, &opts).expect("training");
            eprintln!(
                "trained fixture in {:.0}s, epoch losses {:?}",
                start.elapsed().as_secs_f64(),
                report.epoch_losses
            );
            model.save(&dir).expect("save fixture");
            std::fs::write(&losses_path, serde_json::to_vec(&report.epoch_losses).unwrap()).expect("save losses");
            (model, report.epoch_losses)
        }
    };
    Fixture {
        data,
        epoch_losses,
        codec,
        model,
        schedule,
    }
}

pub fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(build)
}
