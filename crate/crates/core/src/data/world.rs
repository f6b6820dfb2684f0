//! Synthetic annotated grid world: sprites moving on a coarse grid, rendered
//! as grayscale frames with a score digit in a band above the play area.
//!
//! Every label is a deterministic function of the rendered pixels: sprites
//! have distinct intensities and always occupy distinct cells, and the digit
//! font has no two identical glyphs.

use std::collections::BTreeMap;

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{rng_from, AnnotatedFrame, Category, Dataset, Episode, LabelSchema, VariableSpec};
use crate::error::{Error, Result};
use crate::kv::{KvReader, KvWriter};

/// Sprite names in drawing order; the first `sprites` are used.
pub const SPRITE_NAMES: [&str; 4] = ["agent", "small", "other", "other2"];
/// Pixel intensity (out of 255) of each sprite.
pub const SPRITE_LEVELS: [u8; 4] = [255, 205, 155, 105];
/// Score digit intensity.
pub const DIGIT_LEVEL: u8 = 255;
/// Smallest cell that fits every sprite pattern.
pub const MIN_CELL: usize = 4;
/// Smallest band that fits the 3x5 digit with a one-pixel margin.
pub const MIN_BAND: usize = 7;

/// 4x4 sprite patterns, row-major, `1` = lit.
const PATTERNS: [[u8; 16]; 4] = [
    [1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1],
    [0, 0, 0, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0],
    [1, 1, 1, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 1, 1, 1],
    [1, 0, 0, 1, 0, 1, 1, 0, 0, 1, 1, 0, 1, 0, 0, 1],
];

/// 3x5 digit glyphs, row-major.
pub const DIGITS: [[u8; 15]; 10] = [
    [1, 1, 1, 1, 0, 1, 1, 0, 1, 1, 0, 1, 1, 1, 1],
    [0, 1, 0, 1, 1, 0, 0, 1, 0, 0, 1, 0, 1, 1, 1],
    [1, 1, 1, 0, 0, 1, 1, 1, 1, 1, 0, 0, 1, 1, 1],
    [1, 1, 1, 0, 0, 1, 0, 1, 1, 0, 0, 1, 1, 1, 1],
    [1, 0, 1, 1, 0, 1, 1, 1, 1, 0, 0, 1, 0, 0, 1],
    [1, 1, 1, 1, 0, 0, 1, 1, 1, 0, 0, 1, 1, 1, 1],
    [1, 1, 1, 1, 0, 0, 1, 1, 1, 1, 0, 1, 1, 1, 1],
    [1, 1, 1, 0, 0, 1, 0, 1, 0, 0, 1, 0, 0, 1, 0],
    [1, 1, 1, 1, 0, 1, 1, 1, 1, 1, 0, 1, 1, 1, 1],
    [1, 1, 1, 1, 0, 1, 1, 1, 1, 0, 0, 1, 1, 1, 1],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorldSpec {
    pub grid_width: usize,
    pub grid_height: usize,
    /// Pixels per grid cell side.
    pub cell_size: usize,
    /// Height of the score band above the play area.
    pub band_height: usize,
    /// Number of moving sprites (agent, small object, then others).
    pub sprites: usize,
    /// Per-axis displacement is uniform in `-max_step..=max_step`.
    pub max_step: usize,
    /// Probability that a sprite attempts a move on a given step.
    pub move_prob: f64,
    /// Background pixels are uniform in `0..=noise` (out of 255), redrawn
    /// every frame.
    pub noise: u8,
    pub episode_length: usize,
    pub episodes: usize,
    pub seed: u64,
}

impl Default for SyntheticWorldSpec {
    fn default() -> Self {
        Self {
            grid_width: 8,
            grid_height: 7,
            cell_size: 8,
            band_height: 8,
            sprites: 3,
            max_step: 1,
            move_prob: 0.8,
            noise: 0,
            episode_length: 50,
            episodes: 60,
            seed: 0,
        }
    }
}

/// Sprite cell positions `(x, y)` and the score counter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorldState {
    pub positions: Vec<(usize, usize)>,
    pub score: usize,
}

impl SyntheticWorldSpec {
    /// `(height, width)` of rendered frames.
    pub fn image_hw(&self) -> (usize, usize) {
        (
            self.band_height + self.grid_height * self.cell_size,
            self.grid_width * self.cell_size,
        )
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.grid_width < 1 || self.grid_height < 1 {
            v.push("grid_width and grid_height must be ≥ 1".to_string());
        }
        if self.cell_size < MIN_CELL {
            v.push(format!("cell_size must be ≥ {MIN_CELL}"));
        }
        if self.band_height < MIN_BAND {
            v.push(format!("band_height must be ≥ {MIN_BAND}"));
        }
        if self.grid_width * self.cell_size < 5 {
            v.push("grid_width * cell_size must be ≥ 5 to fit the score digit".to_string());
        }
        if self.sprites < 1 || self.sprites > SPRITE_NAMES.len() {
            v.push(format!("sprites must be in 1..={}", SPRITE_NAMES.len()));
        }
        if self.sprites > self.grid_width * self.grid_height {
            v.push(format!(
                "sprites ({}) exceeds grid capacity ({} cells)",
                self.sprites,
                self.grid_width * self.grid_height
            ));
        }
        if !(0.0..=1.0).contains(&self.move_prob) {
            v.push("move_prob must be in [0, 1]".to_string());
        }
        if self.noise as u32 + 10 > *SPRITE_LEVELS.iter().min().unwrap() as u32 {
            v.push(format!(
                "noise must be below {} so sprites stay distinguishable",
                SPRITE_LEVELS.iter().min().unwrap() - 10
            ));
        }
        if self.episode_length < 2 {
            v.push("episode_length must be ≥ 2".to_string());
        }
        if self.episodes < 1 {
            v.push("episodes must be ≥ 1".to_string());
        }
        v
    }

    fn check(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::WorldSpec(v.join("; ")))
        }
    }

    pub fn schema(&self) -> LabelSchema {
        let mut variables = Vec::new();
        for (i, name) in SPRITE_NAMES.iter().take(self.sprites).enumerate() {
            let category = match i {
                0 => Category::AgentLoc,
                1 => Category::SmallLoc,
                _ => Category::OtherLoc,
            };
            variables.push(VariableSpec {
                name: format!("{name}_x"),
                category,
                num_classes: self.grid_width,
            });
            variables.push(VariableSpec {
                name: format!("{name}_y"),
                category,
                num_classes: self.grid_height,
            });
        }
        variables.push(VariableSpec {
            name: "score".into(),
            category: Category::ScoreDisplay,
            num_classes: 10,
        });
        LabelSchema { variables }
    }

    pub fn write_kv(&self, prefix: &str, w: &mut KvWriter) {
        let k = |name: &str| format!("{prefix}.{name}");
        w.put(&k("grid_width"), self.grid_width)
            .put(&k("grid_height"), self.grid_height)
            .put(&k("cell_size"), self.cell_size)
            .put(&k("band_height"), self.band_height)
            .put(&k("sprites"), self.sprites)
            .put(&k("max_step"), self.max_step)
            .put(&k("move_prob"), self.move_prob)
            .put(&k("noise"), self.noise)
            .put(&k("episode_length"), self.episode_length)
            .put(&k("episodes"), self.episodes)
            .put(&k("seed"), self.seed);
    }

    pub fn read_kv(&mut self, prefix: &str, r: &mut KvReader) -> Result<()> {
        let k = |name: &str| format!("{prefix}.{name}");
        r.take(&k("grid_width"), &mut self.grid_width)?;
        r.take(&k("grid_height"), &mut self.grid_height)?;
        r.take(&k("cell_size"), &mut self.cell_size)?;
        r.take(&k("band_height"), &mut self.band_height)?;
        r.take(&k("sprites"), &mut self.sprites)?;
        r.take(&k("max_step"), &mut self.max_step)?;
        r.take(&k("move_prob"), &mut self.move_prob)?;
        r.take(&k("noise"), &mut self.noise)?;
        r.take(&k("episode_length"), &mut self.episode_length)?;
        r.take(&k("episodes"), &mut self.episodes)?;
        r.take(&k("seed"), &mut self.seed)?;
        Ok(())
    }

    /// Standalone text form (keys without prefix).
    pub fn to_text(&self) -> String {
        let mut w = KvWriter::new();
        w.comment("synthetic world");
        let mut inner = KvWriter::new();
        self.write_kv("world", &mut inner);
        let body = inner.finish().replace("world.", "");
        format!("{}{body}", w.finish())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut r = KvReader::parse(text)?;
        let mut spec = Self::default();
        let keys: Vec<String> = r.remaining().map(|(k, _)| k.to_string()).collect();
        let mut prefixed = String::new();
        for key in keys {
            let (v, _) = r.take_raw(&key).expect("listed");
            prefixed.push_str(&format!("world.{key} = {v}\n"));
        }
        let mut r = KvReader::parse(&prefixed)?;
        spec.read_kv("world", &mut r)?;
        r.finish().map_err(|e| Error::WorldSpec(e.to_string()))?;
        Ok(spec)
    }

    /// SHA-256 of the canonical text form.
    pub fn spec_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn initial_state(&self, episode: usize) -> Result<WorldState> {
        self.check()?;
        let mut rng = rng_from(self.seed, 0x4550_0000 + episode as u64);
        let mut positions: Vec<(usize, usize)> = Vec::with_capacity(self.sprites);
        while positions.len() < self.sprites {
            let p = (rng.random_range(0..self.grid_width), rng.random_range(0..self.grid_height));
            if !positions.contains(&p) {
                positions.push(p);
            }
        }
        Ok(WorldState { positions, score: 0 })
    }

    /// One dynamics step. Sprites move in index order; a move into an
    /// occupied cell is cancelled. The score counts agent moves mod 10.
    pub fn step(&self, state: &WorldState, rng: &mut impl Rng) -> WorldState {
        let mut next = state.clone();
        let reach = self.max_step as i64;
        for i in 0..next.positions.len() {
            if !rng.random_bool(self.move_prob) {
                continue;
            }
            let dx = rng.random_range(-reach..=reach);
            let dy = rng.random_range(-reach..=reach);
            let (x, y) = next.positions[i];
            let nx = (x as i64 + dx).clamp(0, self.grid_width as i64 - 1) as usize;
            let ny = (y as i64 + dy).clamp(0, self.grid_height as i64 - 1) as usize;
            if (nx, ny) != (x, y) && !next.positions.contains(&(nx, ny)) {
                next.positions[i] = (nx, ny);
                if i == 0 {
                    next.score = (next.score + 1) % 10;
                }
            }
        }
        next
    }

    pub fn labels(&self, state: &WorldState) -> BTreeMap<String, i64> {
        let mut labels = BTreeMap::new();
        for (name, &(x, y)) in SPRITE_NAMES.iter().zip(&state.positions) {
            labels.insert(format!("{name}_x"), x as i64);
            labels.insert(format!("{name}_y"), y as i64);
        }
        labels.insert("score".into(), state.score as i64);
        labels
    }

    /// Renders a frame as 8-bit levels, `H x W x 1`.
    pub fn render_levels(&self, state: &WorldState, rng: &mut impl Rng) -> Array3<u8> {
        let (h, w) = self.image_hw();
        let mut img = if self.noise == 0 {
            Array3::zeros((h, w, 1))
        } else {
            Array3::from_shape_simple_fn((h, w, 1), || rng.random_range(0..=self.noise))
        };
        let glyph = &DIGITS[state.score % 10];
        let top = (self.band_height - 5) / 2;
        for r in 0..5 {
            for c in 0..3 {
                if glyph[r * 3 + c] == 1 {
                    img[[top + r, 1 + c, 0]] = DIGIT_LEVEL;
                }
            }
        }
        let scale = self.cell_size / MIN_CELL;
        let inset = (self.cell_size - MIN_CELL * scale) / 2;
        for (i, &(x, y)) in state.positions.iter().enumerate() {
            let oy = self.band_height + y * self.cell_size + inset;
            let ox = x * self.cell_size + inset;
            for r in 0..MIN_CELL * scale {
                for c in 0..MIN_CELL * scale {
                    if PATTERNS[i][(r / scale) * 4 + c / scale] == 1 {
                        img[[oy + r, ox + c, 0]] = SPRITE_LEVELS[i];
                    }
                }
            }
        }
        img
    }

    pub fn generate_episode(&self, episode: usize) -> Result<Episode> {
        let mut state = self.initial_state(episode)?;
        let mut dyn_rng = rng_from(self.seed, 0x4459_0000 + episode as u64);
        let mut noise_rng = rng_from(self.seed, 0x4e4f_0000 + episode as u64);
        let mut frames = Vec::with_capacity(self.episode_length);
        for t in 0..self.episode_length {
            if t > 0 {
                state = self.step(&state, &mut dyn_rng);
            }
            let levels = self.render_levels(&state, &mut noise_rng);
            frames.push(AnnotatedFrame {
                image: levels.mapv(|v| v as f32 / 255.0),
                labels: self.labels(&state),
            });
        }
        Ok(Episode { id: episode, frames })
    }

    pub fn generate(&self) -> Result<Dataset> {
        let episodes = (0..self.episodes)
            .map(|i| self.generate_episode(i))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(self.schema(), episodes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_world_repeats_frames() {
        let spec = SyntheticWorldSpec {
            max_step: 0,
            episode_length: 6,
            ..Default::default()
        };
        let ep = spec.generate_episode(0).unwrap();
        assert!(ep.frames.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn too_many_sprites_is_an_error() {
        let spec = SyntheticWorldSpec {
            grid_width: 1,
            grid_height: 2,
            sprites: 3,
            cell_size: 8,
            ..Default::default()
        };
        assert!(matches!(spec.generate_episode(0), Err(Error::WorldSpec(_))));
    }

    #[test]
    fn text_round_trip() {
        let spec = SyntheticWorldSpec {
            noise: 30,
            seed: 9,
            ..Default::default()
        };
        assert_eq!(SyntheticWorldSpec::from_text(&spec.to_text()).unwrap(), spec);
        assert!(SyntheticWorldSpec::from_text("bogus = 1").is_err());
        assert_eq!(spec.spec_hash(), spec.clone().spec_hash());
    }

    #[test]
    fn default_frame_is_64_square() {
        assert_eq!(SyntheticWorldSpec::default().image_hw(), (64, 64));
        assert!(SyntheticWorldSpec::default().violations().is_empty());
    }
}
