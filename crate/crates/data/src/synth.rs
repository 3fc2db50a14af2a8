//! Seeded synthetic bi-temporal scenes.
//!
//! Each scene holds building footprints that appear, disappear or persist
//! between the two dates. The label is the symmetric difference of the two
//! dates' footprint unions. Persistent buildings may be repainted, shadows
//! may move and illumination drifts; none of these enter the label.

use mfds_core::sample::SamplePair;
use mfds_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DataError, Result};
use crate::raster::{Corner, Footprint, Mask, Rect};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Image side in pixels.
    pub size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Building side range as a fraction of `size`.
    pub min_side: f64,
    pub max_side: f64,
    /// Chance that a building is L-shaped rather than rectangular.
    pub l_shape_prob: f64,
    pub appear_prob: f64,
    pub disappear_prob: f64,
    /// The remainder `1 - appear - disappear - persist` is left unbuilt.
    pub persist_prob: f64,
    /// Chance that a persistent building is repainted.
    pub color_change_prob: f64,
    pub noise_amplitude: f64,
    /// Peak relative brightness change of the illumination field.
    pub illumination_shift: f64,
    pub shadow_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            size: 256,
            min_shapes: 3,
            max_shapes: 7,
            min_side: 0.12,
            max_side: 0.3,
            l_shape_prob: 0.35,
            appear_prob: 0.3,
            disappear_prob: 0.2,
            persist_prob: 0.5,
            color_change_prob: 0.6,
            noise_amplitude: 0.04,
            illumination_shift: 0.15,
            shadow_prob: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::Config(m));
        if self.size == 0 || self.size % 8 != 0 {
            return bad(format!("size {} must be a positive multiple of 8", self.size));
        }
        if self.min_shapes > self.max_shapes {
            return bad("min_shapes exceeds max_shapes".into());
        }
        if !(0.0 < self.min_side && self.min_side <= self.max_side && self.max_side < 1.0) {
            return bad("need 0 < min_side <= max_side < 1".into());
        }
        let probs = [
            ("l_shape_prob", self.l_shape_prob),
            ("appear_prob", self.appear_prob),
            ("disappear_prob", self.disappear_prob),
            ("persist_prob", self.persist_prob),
            ("color_change_prob", self.color_change_prob),
            ("shadow_prob", self.shadow_prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        if self.appear_prob + self.disappear_prob + self.persist_prob > 1.0 + 1e-12 {
            return bad("appear + disappear + persist probabilities exceed 1".into());
        }
        if self.noise_amplitude < 0.0 || !(0.0..1.0).contains(&self.illumination_shift) {
            return bad("noise_amplitude must be >= 0 and illumination_shift in [0, 1)".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Appear,
    Disappear,
    Persist,
}

impl Status {
    pub fn in_a(self) -> bool {
        matches!(self, Status::Disappear | Status::Persist)
    }

    pub fn in_b(self) -> bool {
        matches!(self, Status::Appear | Status::Persist)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Building {
    pub footprint: Footprint,
    pub status: Status,
    pub color_a: [f32; 3],
    pub color_b: [f32; 3],
    /// Shadow offsets per date, if any.
    pub shadow_a: Option<(i32, i32)>,
    pub shadow_b: Option<(i32, i32)>,
}

impl Building {
    pub fn repainted(&self) -> bool {
        self.status == Status::Persist && self.color_a != self.color_b
    }
}

/// A generated pair with the generator's own bookkeeping.
#[derive(Debug, Clone)]
pub struct SynthSample {
    pub pair: SamplePair,
    pub buildings: Vec<Building>,
    /// Repainted persistent buildings.
    pub color_change: Mask,
    /// Shadowed pixels outside every footprint.
    pub shadow: Mask,
}

fn color(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> [f32; 3] {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

fn distinct_color(rng: &mut ChaCha8Rng, from: [f32; 3]) -> [f32; 3] {
    loop {
        let c = color(rng, 0.15, 0.95);
        let d: f32 = c.iter().zip(&from).map(|(a, b)| (a - b).abs()).sum();
        if d > 0.6 {
            return c;
        }
    }
}

fn footprint(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Footprint {
    let s = cfg.size as f64;
    let lo = ((cfg.min_side * s).round() as i32).max(2);
    let hi = ((cfg.max_side * s).round() as i32).max(lo);
    let w = rng.random_range(lo..=hi);
    let h = rng.random_range(lo..=hi);
    let x0 = rng.random_range(0..=(cfg.size as i32 - w));
    let y0 = rng.random_range(0..=(cfg.size as i32 - h));
    let outer = Rect::new(x0, y0, x0 + w, y0 + h);
    if w >= 4 && h >= 4 && rng.random_bool(cfg.l_shape_prob) {
        let corner = [Corner::TopLeft, Corner::TopRight, Corner::BottomRight, Corner::BottomLeft][rng.random_range(0..4)];
        Footprint::L {
            outer,
            corner,
            notch_w: rng.random_range(w / 4..=w / 2).max(1),
            notch_h: rng.random_range(h / 4..=h / 2).max(1),
        }
    } else {
        Footprint::Rect(outer)
    }
}

fn sun(rng: &mut ChaCha8Rng, size: usize) -> (i32, i32) {
    let reach = (size as i32 / 40).max(2);
    let dx = rng.random_range(1..=reach) * if rng.random_bool(0.5) { 1 } else { -1 };
    let dy = rng.random_range(1..=reach) * if rng.random_bool(0.5) { 1 } else { -1 };
    (dx, dy)
}

/// Brightness gain field of one date: a random tilt plus a slow ripple.
fn illumination(rng: &mut ChaCha8Rng, size: usize, shift: f64) -> Vec<f32> {
    let (gx, gy) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let (fx, fy, ph) = (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0), rng.random_range(0.0..6.3));
    let offset: f64 = rng.random_range(-0.5..0.5);
    let s = size as f64;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 / s - 0.5, y as f64 / s - 0.5);
            let t = 0.5 * (gx * u + gy * v) + 0.3 * (std::f64::consts::TAU * (fx * u + fy * v) + ph).sin() + 0.4 * offset;
            out.push((1.0 + shift * t.clamp(-1.0, 1.0)) as f32);
        }
    }
    out
}

struct Scene {
    size: usize,
    /// Persistent ground texture shared by both dates.
    ground: Vec<[f32; 3]>,
}

impl Scene {
    fn new(rng: &mut ChaCha8Rng, size: usize) -> Self {
        let base = [rng.random_range(0.25..0.5f32), rng.random_range(0.3..0.55), rng.random_range(0.2..0.4)];
        let waves: Vec<(f64, f64, f64, usize)> = (0..4)
            .map(|_| (rng.random_range(2.0..9.0), rng.random_range(2.0..9.0), rng.random_range(0.0..6.3), rng.random_range(0..3)))
            .collect();
        let s = size as f64;
        let mut ground = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let mut c = base;
                for &(fx, fy, ph, ch) in &waves {
                    c[ch] += 0.06 * (std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) / s + ph).sin() as f32;
                }
                ground.push(c);
            }
        }
        Scene { size, ground }
    }

    fn render(
        &self,
        rng: &mut ChaCha8Rng,
        buildings: &[(Footprint, [f32; 3])],
        shadows: &Mask,
        gain: &[f32],
        noise: f64,
    ) -> Tensor<f32> {
        let n = self.size;
        let mut px = self.ground.clone();
        for (p, &s) in px.iter_mut().zip(&shadows.data) {
            if s {
                p.iter_mut().for_each(|v| *v *= 0.45);
            }
        }
        for (fp, col) in buildings {
            let mut m = Mask::new(n, n);
            m.fill(fp);
            for (p, &inside) in px.iter_mut().zip(&m.data) {
                if inside {
                    *p = *col;
                }
            }
        }
        let mut t = Tensor::zeros([1, 3, n, n]);
        for y in 0..n {
            for x in 0..n {
                let i = y * n + x;
                for c in 0..3 {
                    let jitter = if noise > 0.0 { rng.random_range(-noise..noise) as f32 } else { 0.0 };
                    t.set(0, c, y, x, (px[i][c] * gain[i] + jitter).clamp(0.0, 1.0));
                }
            }
        }
        t
    }
}

fn mask_tensor(m: &Mask) -> Tensor<f32> {
    Tensor::from_vec([1, 1, m.height, m.width], m.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
        .expect("mask shape")
}

pub fn sample_id(seed: u64, index: usize) -> String {
    format!("synth-{seed}-{index:05}")
}

/// Generates sample `index` of the sequence defined by `cfg`. Samples are
/// independent: each draws from its own random stream.
pub fn generate_one(cfg: &SynthConfig, index: usize) -> Result<SynthSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let n = cfg.size;

    let scene = Scene::new(&mut rng, n);
    let count = rng.random_range(cfg.min_shapes..=cfg.max_shapes);
    let sun_a = sun(&mut rng, n);
    let sun_b = sun(&mut rng, n);
    let mut buildings: Vec<Building> = Vec::with_capacity(count);
    let mut placed: Vec<Rect> = Vec::new();
    for _ in 0..count {
        let Some(fp) = (0..50)
            .map(|_| footprint(&mut rng, cfg))
            .find(|fp| placed.iter().all(|r| !r.intersects(&fp.bbox().grow(2))))
        else {
            continue;
        };
        let u: f64 = rng.random();
        let status = if u < cfg.appear_prob {
            Status::Appear
        } else if u < cfg.appear_prob + cfg.disappear_prob {
            Status::Disappear
        } else if u < cfg.appear_prob + cfg.disappear_prob + cfg.persist_prob {
            Status::Persist
        } else {
            continue;
        };
        placed.push(fp.bbox());
        let color_a = color(&mut rng, 0.15, 0.95);
        let color_b = if status == Status::Persist && rng.random_bool(cfg.color_change_prob) {
            distinct_color(&mut rng, color_a)
        } else {
            color_a
        };
        let shadow_a = (status.in_a() && rng.random_bool(cfg.shadow_prob)).then_some(sun_a);
        let shadow_b = (status.in_b() && rng.random_bool(cfg.shadow_prob)).then_some(sun_b);
        buildings.push(Building { footprint: fp, status, color_a, color_b, shadow_a, shadow_b });
    }

    let mut fa = Mask::new(n, n);
    let mut fb = Mask::new(n, n);
    let mut sa = Mask::new(n, n);
    let mut sb = Mask::new(n, n);
    let mut repaint = Mask::new(n, n);
    for b in &buildings {
        if b.status.in_a() {
            fa.fill(&b.footprint);
        }
        if b.status.in_b() {
            fb.fill(&b.footprint);
        }
        if let Some((dx, dy)) = b.shadow_a {
            sa.fill(&b.footprint.translate(dx, dy));
        }
        if let Some((dx, dy)) = b.shadow_b {
            sb.fill(&b.footprint.translate(dx, dy));
        }
        if b.repainted() {
            repaint.fill(&b.footprint);
        }
    }
    let gt = fa.zip(&fb, |a, b| a != b);
    let any_fp = fa.zip(&fb, |a, b| a || b);
    let shadow = sa.zip(&sb, |a, b| a || b).zip(&any_fp, |s, f| s && !f);
    let color_change = repaint.zip(&gt, |r, g| r && !g);

    let gain_a = illumination(&mut rng, n, cfg.illumination_shift);
    let gain_b = illumination(&mut rng, n, cfg.illumination_shift);
    let drawn = |at_b: bool| -> Vec<(Footprint, [f32; 3])> {
        buildings
            .iter()
            .filter(|b| if at_b { b.status.in_b() } else { b.status.in_a() })
            .map(|b| (b.footprint, if at_b { b.color_b } else { b.color_a }))
            .collect()
    };
    let image_a = scene.render(&mut rng, &drawn(false), &sa, &gain_a, cfg.noise_amplitude);
    let image_b = scene.render(&mut rng, &drawn(true), &sb, &gain_b, cfg.noise_amplitude);

    let pair = SamplePair::new(sample_id(cfg.seed, index), image_a, image_b, mask_tensor(&gt))?;
    Ok(SynthSample { pair, buildings, color_change, shadow })
}

/// The first `n` samples of the sequence defined by `cfg`.
pub fn generate(cfg: &SynthConfig, n: usize) -> Result<Vec<SynthSample>> {
    if n == 0 {
        return Err(DataError::Config("sample count must be at least 1".into()));
    }
    (0..n).map(|i| generate_one(cfg, i)).collect()
}

pub fn pairs(samples: Vec<SynthSample>) -> Vec<SamplePair> {
    samples.into_iter().map(|s| s.pair).collect()
}

impl SynthSample {
    pub fn color_change_tensor(&self) -> Tensor<f32> {
        mask_tensor(&self.color_change)
    }

    pub fn shadow_tensor(&self) -> Tensor<f32> {
        mask_tensor(&self.shadow)
    }
}
