//! Toy cross-view dataset: each object is a colored body with an attached
//! part whose color encodes the affordance. Egocentric views show the body
//! in a class-typical color, so the whole object is discriminative and not
//! just the part. Exocentric views repaint the body per interaction and add
//! skin-colored interactor blobs around the part, which is the only cue
//! they share.

use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{substream, Stream};
use crate::tensor::Tensor;

use super::image::encode_ppm;
use super::manifest::View;
use super::store::{ANNOTATION_DIR, EGO_DIR, EXO_DIR};

const AFFORDANCE_NAMES: [&str; 10] = [
    "cut", "hold", "pour", "press", "sip", "open", "push", "stir", "swing", "throw",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_affordances: usize,
    pub n_objects: usize,
    /// Egocentric and exocentric images each.
    pub images_per_object: usize,
    pub image_size: usize,
    pub occluders_min: usize,
    pub occluders_max: usize,
    /// Blob radius range as a fraction of the image size.
    pub occluder_radius: (f64, f64),
    pub points_min: usize,
    pub points_max: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_affordances: 5,
            n_objects: 10,
            images_per_object: 12,
            image_size: 64,
            occluders_min: 1,
            occluders_max: 3,
            occluder_radius: (1.0 / 24.0, 1.0 / 12.0),
            points_min: 3,
            points_max: 6,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_affordances == 0 {
            return fail("n_affordances must be at least 1".into());
        }
        if self.n_objects < self.n_affordances {
            return fail(format!(
                "n_objects ({}) must be >= n_affordances ({})",
                self.n_objects, self.n_affordances
            ));
        }
        if self.image_size < 32 {
            return fail(format!("image size must be >= 32, got {}", self.image_size));
        }
        if self.images_per_object == 0 {
            return fail("images_per_object must be at least 1".into());
        }
        if self.occluders_min > self.occluders_max {
            return fail("occluder count range is empty".into());
        }
        let (lo, hi) = self.occluder_radius;
        if !(lo > 0.0 && lo <= hi && hi <= 0.5) {
            return fail(format!("occluder radius range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 0.5"));
        }
        if self.points_min == 0 || self.points_min > self.points_max {
            return fail("annotation point range must be nonempty and start at 1 or more".into());
        }
        Ok(())
    }

    pub fn affordance_name(&self, id: usize) -> String {
        if self.n_affordances <= AFFORDANCE_NAMES.len() {
            AFFORDANCE_NAMES[id].to_string()
        } else {
            format!("aff{id:02}")
        }
    }
}

/// Pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthRecord {
    pub view: View,
    pub affordance: usize,
    pub object: String,
    pub image: PathBuf,
    pub part: Rect,
    /// Empty for exocentric images.
    pub points: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSummary {
    pub root: PathBuf,
    pub affordances: Vec<String>,
    pub records: Vec<SynthRecord>,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

struct Canvas {
    n: usize,
    px: Vec<[f64; 3]>,
}

impl Canvas {
    fn fill_rect<R: Rng>(&mut self, r: Rect, color: [f64; 3], noise: f64, rng: &mut R) {
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                self.px[y * self.n + x] = jitter(color, noise, rng);
            }
        }
    }

    fn fill_disc<R: Rng>(&mut self, cx: f64, cy: f64, radius: f64, color: [f64; 3], rng: &mut R) {
        let n = self.n as f64;
        let y0 = (cy - radius).floor().max(0.0) as usize;
        let y1 = ((cy + radius).ceil().min(n - 1.0)) as usize;
        let x0 = (cx - radius).floor().max(0.0) as usize;
        let x1 = ((cx + radius).ceil().min(n - 1.0)) as usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                if dx * dx + dy * dy <= radius * radius {
                    self.px[y * self.n + x] = jitter(color, 0.02, rng);
                }
            }
        }
    }

    fn into_tensor(self) -> Result<Tensor> {
        let hw = self.n * self.n;
        let mut data = vec![0.0; 3 * hw];
        for (i, p) in self.px.iter().enumerate() {
            for c in 0..3 {
                data[c * hw + i] = p[c];
            }
        }
        Tensor::new(vec![3, self.n, self.n], data)
    }
}

fn jitter<R: Rng>(color: [f64; 3], amount: f64, rng: &mut R) -> [f64; 3] {
    if amount == 0.0 {
        return color;
    }
    color.map(|c| (c + rng.gen_range(-amount..=amount)).clamp(0.0, 1.0))
}

struct Scene {
    image: Tensor,
    part: Rect,
}

/// Object body plus part strip at a random pose and scale.
fn render<R: Rng>(
    cfg: &SynthConfig,
    body_color: [f64; 3],
    part_color: [f64; 3],
    interactors: bool,
    rng: &mut R,
) -> Result<Scene> {
    let n = cfg.image_size;
    let nf = n as f64;
    let g = rng.gen_range(0.25..0.55);
    let mut canvas = Canvas {
        n,
        px: vec![[g; 3]; n * n],
    };
    for p in canvas.px.iter_mut() {
        *p = jitter(*p, 0.04, rng);
    }
    let bw = (rng.gen_range(0.30..0.50) * nf) as usize;
    let bh = (rng.gen_range(0.22..0.40) * nf) as usize;
    let thick = ((rng.gen_range(0.12..0.20) * nf) as usize).max(2);
    let side = rng.gen_range(0..4);
    // part span along the attached side
    let horizontal = side < 2;
    let along = if horizontal { bw } else { bh };
    let span = ((along as f64 * rng.gen_range(0.45..0.75)) as usize).max(2);
    let offset = rng.gen_range(0..=along - span);
    let (ext_w, ext_h) = if horizontal { (bw, bh + thick) } else { (bw + thick, bh) };
    let margin = 2;
    let ox = rng.gen_range(margin..=n - margin - ext_w);
    let oy = rng.gen_range(margin..=n - margin - ext_h);
    let (body, part) = match side {
        // part above the body
        0 => (
            Rect { x0: ox, y0: oy + thick, x1: ox + bw, y1: oy + thick + bh },
            Rect { x0: ox + offset, y0: oy, x1: ox + offset + span, y1: oy + thick },
        ),
        // below
        1 => (
            Rect { x0: ox, y0: oy, x1: ox + bw, y1: oy + bh },
            Rect { x0: ox + offset, y0: oy + bh, x1: ox + offset + span, y1: oy + bh + thick },
        ),
        // left
        2 => (
            Rect { x0: ox + thick, y0: oy, x1: ox + thick + bw, y1: oy + bh },
            Rect { x0: ox, y0: oy + offset, x1: ox + thick, y1: oy + offset + span },
        ),
        // right
        _ => (
            Rect { x0: ox, y0: oy, x1: ox + bw, y1: oy + bh },
            Rect { x0: ox + bw, y0: oy + offset, x1: ox + bw + thick, y1: oy + offset + span },
        ),
    };
    canvas.fill_rect(body, jitter(body_color, 0.08, rng), 0.02, rng);
    canvas.fill_rect(part, jitter(part_color, 0.05, rng), 0.02, rng);
    if interactors {
        let count = rng.gen_range(cfg.occluders_min..=cfg.occluders_max);
        let skin = [0.93, 0.75, 0.60];
        for _ in 0..count {
            let r = rng.gen_range(cfg.occluder_radius.0..=cfg.occluder_radius.1) * nf;
            let cx = rng.gen_range(part.x0 as f64..part.x1 as f64) + rng.gen_range(-r..=r);
            let cy = rng.gen_range(part.y0 as f64..part.y1 as f64) + rng.gen_range(-r..=r);
            canvas.fill_disc(cx, cy, r, jitter(skin, 0.05, rng), rng);
        }
    }
    Ok(Scene {
        image: canvas.into_tensor()?,
        part,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Write the dataset tree under `root`. Object `j` has affordance
/// `j mod n_affordances`; each object draws from its own random substream.
pub fn generate_synthetic(cfg: &SynthConfig, root: &Path) -> Result<SynthSummary> {
    cfg.validate()?;
    let affordances: Vec<String> = (0..cfg.n_affordances).map(|a| cfg.affordance_name(a)).collect();
    let mut records = Vec::new();
    for j in 0..cfg.n_objects {
        let aff = j % cfg.n_affordances;
        let aff_name = &affordances[aff];
        let object = format!("{aff_name}_obj{j:02}");
        let mut rng = substream(cfg.seed, Stream::Synth, j as u64);
        let n_aff = cfg.n_affordances as f64;
        let part_color = hsv(aff as f64 / n_aff, 0.9, 0.95);
        let body_hue = (aff as f64 + 0.5) / n_aff + rng.gen_range(-0.1..0.1) / n_aff;
        let ego_body = hsv(body_hue, 0.55, rng.gen_range(0.7..0.85));
        for (view, dir) in [(View::Ego, EGO_DIR), (View::Exo, EXO_DIR)] {
            for k in 0..cfg.images_per_object {
                let body_color = match view {
                    View::Ego => ego_body,
                    View::Exo => hsv(rng.gen::<f64>(), rng.gen_range(0.05..0.3), rng.gen_range(0.5..0.9)),
                };
                let scene = render(cfg, body_color, part_color, view == View::Exo, &mut rng)?;
                let stem = format!("{object}_{}{k:03}", if view == View::Ego { "ego" } else { "exo" });
                let image = root.join(dir).join(aff_name).join(&object).join(format!("{stem}.ppm"));
                write_file(&image, &encode_ppm(&scene.image)?)?;
                let mut points = Vec::new();
                if view == View::Ego {
                    let count = rng.gen_range(cfg.points_min..=cfg.points_max);
                    let p = scene.part;
                    for _ in 0..count {
                        points.push((rng.gen_range(p.x0..p.x1), rng.gen_range(p.y0..p.y1)));
                    }
                    let csv: String = points.iter().map(|(x, y)| format!("{x},{y}\n")).collect();
                    let ann = root
                        .join(ANNOTATION_DIR)
                        .join(aff_name)
                        .join(&object)
                        .join(format!("{stem}.csv"));
                    write_file(&ann, csv.as_bytes())?;
                }
                records.push(SynthRecord {
                    view,
                    affordance: aff,
                    object: object.clone(),
                    image,
                    part: scene.part,
                    points,
                });
            }
        }
    }
    Ok(SynthSummary {
        root: root.to_path_buf(),
        affordances,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::{load_manifest, scan_manifest, SplitMode};
    use crate::data::store::DataStore;

    fn small() -> SynthConfig {
        SynthConfig {
            n_affordances: 2,
            n_objects: 4,
            images_per_object: 3,
            image_size: 32,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn points_lie_inside_the_part() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_synthetic(&small(), dir.path()).unwrap();
        assert_eq!(s.records.len(), 4 * 3 * 2);
        for r in &s.records {
            assert!(r.points.iter().all(|&(x, y)| r.part.contains(x, y)));
            assert_eq!(r.points.is_empty(), r.view == View::Exo);
        }
    }

    #[test]
    fn manifest_round_trip_keeps_every_image() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_synthetic(&small(), dir.path()).unwrap();
        let store = DataStore::new(dir.path());
        let m = load_manifest(&store, SplitMode::Seen, 0).unwrap();
        assert_eq!(m.len(), s.records.len());
        assert_eq!(m.affordances, s.affordances);
        for e in &m.test {
            let rec = s.records.iter().find(|r| r.image == e.image).unwrap();
            assert_eq!(e.points.as_ref().unwrap().points, rec.points);
        }
        let u = scan_manifest(&store, SplitMode::Unseen, 0).unwrap();
        assert!(u.train_objects().is_disjoint(&u.test_objects()));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            SynthConfig { n_objects: 1, ..small() },
            SynthConfig { image_size: 31, ..small() },
            SynthConfig { occluders_min: 4, ..small() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn unwritable_root_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("plain");
        std::fs::write(&file, b"").unwrap();
        assert!(matches!(generate_synthetic(&small(), &file), Err(Error::Io { .. })));
    }
}
