//! Writes a synthetic world to disk in the layout `vilod serve` reads.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vilod_core::dataset_io::{serialize_yolo_label, Split};
use vilod_core::synth::SyntheticWorld;
use vilod_core::SessionConfig;
use vilod_server::DataLayout;

const WIDTH: u32 = 96;
const HEIGHT: u32 = 72;

const PALETTE: [[u8; 3]; 8] = [
    [150, 110, 70],
    [120, 120, 130],
    [90, 90, 90],
    [235, 235, 235],
    [200, 60, 60],
    [60, 160, 80],
    [70, 90, 200],
    [220, 180, 40],
];

fn render(world: &SyntheticWorld, id: &str, rng: &mut ChaCha8Rng) -> RgbImage {
    let base = [
        rng.gen_range(90..150u8),
        rng.gen_range(120..170u8),
        rng.gen_range(60..110u8),
    ];
    let mut img = RgbImage::from_fn(WIDTH, HEIGHT, |_, _| {
        let j = rng.gen_range(0..12u8);
        Rgb([base[0] + j, base[1] + j, base[2] + j])
    });
    for b in world.registry.labels_of(id).unwrap_or_default() {
        let [x0, y0, x1, y1] = b.bbox.to_xyxy();
        let color = PALETTE[b.class_id as usize % PALETTE.len()];
        let (px0, px1) = ((x0 * WIDTH as f64) as u32, (x1 * WIDTH as f64).ceil() as u32);
        let (py0, py1) = ((y0 * HEIGHT as f64) as u32, (y1 * HEIGHT as f64).ceil() as u32);
        for y in py0..py1.min(HEIGHT) {
            for x in px0..px1.min(WIDTH) {
                img.put_pixel(x, y, Rgb(color));
            }
        }
    }
    img
}

pub fn write_world(world: &SyntheticWorld, root: &Path, seed: u64) -> Result<()> {
    let layout = DataLayout::new(root);
    let dataset = layout.dataset();
    fs::create_dir_all(&dataset).with_context(|| format!("creating {}", dataset.display()))?;
    fs::write(dataset.join("classes.txt"), world.registry.classes.join("\n") + "\n")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for split in Split::ALL {
        let images = dataset.join(split.dir_name()).join("images");
        let labels = dataset.join(split.dir_name()).join("labels");
        fs::create_dir_all(&images)?;
        fs::create_dir_all(&labels)?;
        for id in world.registry.ids(split) {
            render(world, &id, &mut rng)
                .save(images.join(format!("{id}.png")))
                .with_context(|| format!("writing image {id}"))?;
            let boxes = world.registry.labels_of(&id).unwrap_or_default();
            fs::write(labels.join(format!("{id}.txt")), serialize_yolo_label(boxes))?;
        }
    }
    world
        .embeddings
        .write_text(&layout.embeddings(), &layout.embedding_ids())?;
    let config = layout.session_config();
    if !config.exists() {
        fs::write(&config, SessionConfig::default().to_toml_string())?;
    }
    Ok(())
}
