//! Synthetic ground-truth scenes and their line-delimited text format.
//!
//! One scene per line: `id,class,cx,cy,w,h[,class,cx,cy,w,h]...`. Lines
//! starting with `#` and blank lines are ignored.

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use rand::Rng;
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Object {
    pub class_id: usize,
    pub center: [f32; 2],
    pub size: [f32; 2],
}

impl Object {
    /// `(cx, cy, w, h)`.
    pub fn as_box(&self) -> [f32; 4] {
        [self.center[0], self.center[1], self.size[0], self.size[1]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: u64,
    pub objects: Vec<Object>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneConfig {
    pub num_classes: usize,
    pub max_objects: usize,
    pub min_size: f32,
    pub max_size: f32,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            num_classes: 4,
            max_objects: 8,
            min_size: 0.05,
            max_size: 0.3,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "must be >= 2"));
        }
        if self.max_objects < 1 {
            return Err(Error::config("max_objects", "must be >= 1"));
        }
        if !(self.min_size > 0.0 && self.min_size < self.max_size && self.max_size <= 0.3) {
            return Err(Error::config("size range", "need 0 < min_size < max_size <= 0.3"));
        }
        Ok(())
    }
}

/// Deterministic scene for `seed`; its id is the seed.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let mut r = rng::stream(seed, Stream::Data);
    Ok(sample_scene(seed, config, &mut r))
}

/// `count` scenes with ids `0..count`, all drawn from `seed`.
pub fn generate_dataset(seed: u64, count: usize, config: &SceneConfig) -> Result<Vec<Scene>> {
    draw(seed, Stream::Data, count, config)
}

/// Held-out scenes from the evaluation stream of `seed`; disjoint in
/// sampling from [`generate_dataset`] for the same seed.
pub fn generate_eval_set(seed: u64, count: usize, config: &SceneConfig) -> Result<Vec<Scene>> {
    draw(seed, Stream::Eval, count, config)
}

fn draw(seed: u64, which: Stream, count: usize, config: &SceneConfig) -> Result<Vec<Scene>> {
    config.validate()?;
    Ok((0..count as u64)
        .map(|i| sample_scene(i, config, &mut rng::item(seed, which, i)))
        .collect())
}

fn sample_scene<R: Rng>(id: u64, config: &SceneConfig, r: &mut R) -> Scene {
    let count = r.random_range(1..=config.max_objects);
    let objects = (0..count)
        .map(|_| Object {
            class_id: r.random_range(0..config.num_classes),
            center: [r.random_range(0.0..1.0), r.random_range(0.0..1.0)],
            size: [
                r.random_range(config.min_size..=config.max_size),
                r.random_range(config.min_size..=config.max_size),
            ],
        })
        .collect();
    Scene { id, objects }
}

pub fn format_scenes(scenes: &[Scene]) -> String {
    let mut out = String::new();
    for s in scenes {
        write!(out, "{}", s.id).unwrap();
        for o in &s.objects {
            write!(
                out,
                ",{},{},{},{},{}",
                o.class_id, o.center[0], o.center[1], o.size[0], o.size[1]
            )
            .unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn parse_scenes(text: &str) -> Result<Vec<Scene>> {
    let mut scenes = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: String| Error::Parse {
            line: n + 1,
            reason,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if !(fields.len() - 1).is_multiple_of(5) || fields.len() < 6 {
            return Err(bad(format!("expected id and groups of 5 fields, got {} fields", fields.len())));
        }
        let id = fields[0]
            .parse::<u64>()
            .map_err(|e| bad(format!("id: {e}")))?;
        let mut objects = Vec::new();
        for chunk in fields[1..].chunks(5) {
            let class_id = chunk[0]
                .parse::<usize>()
                .map_err(|e| bad(format!("class_id: {e}")))?;
            let mut vals = [0.0f32; 4];
            for (v, s) in vals.iter_mut().zip(&chunk[1..]) {
                *v = s.parse::<f32>().map_err(|e| bad(format!("{s}: {e}")))?;
            }
            if !(0.0..=1.0).contains(&vals[0]) || !(0.0..=1.0).contains(&vals[1]) {
                return Err(bad("center outside unit square".into()));
            }
            objects.push(Object {
                class_id,
                center: [vals[0], vals[1]],
                size: [vals[2], vals[3]],
            });
        }
        scenes.push(Scene { id, objects });
    }
    Ok(scenes)
}
