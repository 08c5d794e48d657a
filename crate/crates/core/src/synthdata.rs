//! Procedural labeled face dataset: parametric identities, optional
//! periocular lesions, analytic eyelid/iris landmarks, identity-disjoint
//! splits, and a rendered recognition gallery.
//!
//! Identity parameters are a fixed function of the identity id; the sample
//! seed only drives view jitter and lesion placement, so the same identity
//! looks consistent across views and datasets.

use std::f32::consts::PI;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::imageio::{self, Image};
use crate::rng::{substream, substream_indexed};

/// Fixed internal key for the identity-id -> parameters mapping.
const IDENTITY_STREAM_KEY: u64 = 0x0f1_face;

pub const EYELID_POINTS_PER_EYE: usize = 8;
pub const IRIS_POINTS_PER_EYE: usize = 4;
pub const LANDMARKS_PER_SAMPLE: usize = 2 * (EYELID_POINTS_PER_EYE + IRIS_POINTS_PER_EYE);

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct IdentityParams {
    /// Face ellipse semi-axes (horizontal, vertical), pixels.
    pub face_axes: (f32, f32),
    /// RGB in [0,1].
    pub skin_tone: [f32; 3],
    /// Half-distance between eye centers, pixels.
    pub eye_spacing: f32,
    pub iris_radius: f32,
    pub iris_color: [f32; 3],
    /// Vertical gap between eyelid top and brow, pixels.
    pub brow_offset: f32,
    /// Nose length multiplier.
    pub nose_scale: f32,
    /// Mouth curvature in [-0.5, 0.5]; positive smiles.
    pub mouth_curve: f32,
}

impl IdentityParams {
    /// Deterministic parameters for an identity, independent of any
    /// dataset seed.
    pub fn derive(identity_id: u32) -> Self {
        let mut rng = substream_indexed(IDENTITY_STREAM_KEY, "identity-params", identity_id as u64);
        let mut u = |lo: f32, hi: f32| lo + (hi - lo) * rng.gen::<f32>();
        let t1 = u(0.55, 0.95);
        let t2 = u(0.72, 0.92);
        let t3 = u(0.70, 0.95);
        IdentityParams {
            face_axes: (u(0.26, 0.34), u(0.30, 0.37)),
            skin_tone: [t1, t1 * t2, t1 * t2 * t3],
            eye_spacing: u(0.34, 0.52),
            iris_radius: u(0.034, 0.056),
            iris_color: [u(0.05, 0.45), u(0.15, 0.55), u(0.25, 0.75)],
            brow_offset: u(0.025, 0.055),
            nose_scale: u(0.5, 1.0),
            mouth_curve: u(-0.5, 0.5),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SyntheticSample {
    #[serde(skip)]
    pub image: Image,
    #[serde(skip)]
    pub lesion_mask: Array2<u8>,
    pub identity_id: u32,
    pub params: IdentityParams,
    pub label: u8,
    /// (x, y) points: left eyelid x8, left iris x4, right eyelid x8,
    /// right iris x4.
    pub landmarks: Vec<(f32, f32)>,
}

/// Concrete geometry of one rendered view (identity params after jitter,
/// resolved to canvas coordinates).
#[derive(Debug, Clone)]
pub struct FaceGeometry {
    pub canvas: usize,
    pub cx: f32,
    pub cy: f32,
    pub face_a: f32,
    pub face_b: f32,
    pub eye_y: f32,
    pub eye_dx: f32,
    pub eyelid_w: f32,
    pub eyelid_h: f32,
    pub iris_r: f32,
    pub skin: [f32; 3],
    pub iris_color: [f32; 3],
    pub brow_gap: f32,
    pub nose_len: f32,
    pub mouth_curve: f32,
}

impl FaceGeometry {
    /// Resolve identity parameters onto a canvas. `jitter` scales geometry
    /// by at most 5% and shifts tone by at most 0.05 per channel.
    pub fn resolve<R: Rng>(
        params: &IdentityParams,
        canvas: usize,
        jitter: Option<&mut R>,
    ) -> Result<Self> {
        let c = canvas as f32;
        let mut gj = [0.0f32; 6];
        let mut tone_j = [0.0f32; 3];
        let mut shift = (0.0f32, 0.0f32);
        if let Some(rng) = jitter {
            for g in gj.iter_mut() {
                *g = rng.gen::<f32>() * 0.10 - 0.05;
            }
            for t in tone_j.iter_mut() {
                *t = rng.gen::<f32>() * 0.10 - 0.05;
            }
            shift = (
                rng.gen::<f32>() * 0.04 - 0.02,
                rng.gen::<f32>() * 0.04 - 0.02,
            );
        }
        let face_a = params.face_axes.0 * (1.0 + gj[0]) * c;
        let face_b = params.face_axes.1 * (1.0 + gj[1]) * c;
        let cx = c / 2.0 + shift.0 * c;
        let cy = c / 2.0 + shift.1 * c;
        // the face must fit with a 2-pixel margin
        if cx - face_a < 2.0
            || cx + face_a > c - 2.0
            || cy - face_b < 2.0
            || cy + face_b > c - 2.0
        {
            return Err(Error::Config(format!(
                "canvas {canvas} too small for face axes ({:.1}, {:.1})",
                face_a, face_b
            )));
        }
        let iris_r = params.iris_radius * (1.0 + gj[2]) * c;
        let skin = [
            (params.skin_tone[0] + tone_j[0]).clamp(0.0, 1.0),
            (params.skin_tone[1] + tone_j[1]).clamp(0.0, 1.0),
            (params.skin_tone[2] + tone_j[2]).clamp(0.0, 1.0),
        ];
        Ok(FaceGeometry {
            canvas,
            cx,
            cy,
            face_a,
            face_b,
            eye_y: cy - 0.20 * face_b,
            eye_dx: params.eye_spacing * (1.0 + gj[3]) * face_a,
            eyelid_w: 2.1 * iris_r,
            eyelid_h: 1.25 * iris_r,
            iris_r,
            skin,
            iris_color: params.iris_color,
            brow_gap: params.brow_offset * (1.0 + gj[4]) * c,
            nose_len: params.nose_scale * (1.0 + gj[5]) * 0.23 * face_b,
            mouth_curve: params.mouth_curve,
        })
    }

    pub fn eye_centers(&self) -> [(f32, f32); 2] {
        [
            (self.cx - self.eye_dx, self.eye_y),
            (self.cx + self.eye_dx, self.eye_y),
        ]
    }

    /// Axis-aligned box around one eye, padded by 2 px.
    pub fn eye_bbox(&self, eye: usize) -> (f32, f32, f32, f32) {
        let (ex, ey) = self.eye_centers()[eye];
        (
            ex - self.eyelid_w - 2.0,
            ey - self.eyelid_h - 2.0,
            ex + self.eyelid_w + 2.0,
            ey + self.eyelid_h + 2.0,
        )
    }

    /// Analytic landmarks: 8 eyelid-ellipse points and 4 iris-circle
    /// points per eye, left eye first.
    pub fn landmarks(&self) -> Vec<(f32, f32)> {
        let mut pts = Vec::with_capacity(LANDMARKS_PER_SAMPLE);
        for (ex, ey) in self.eye_centers() {
            for k in 0..EYELID_POINTS_PER_EYE {
                let th = 2.0 * PI * k as f32 / EYELID_POINTS_PER_EYE as f32;
                pts.push((ex + self.eyelid_w * th.cos(), ey + self.eyelid_h * th.sin()));
            }
            for k in 0..IRIS_POINTS_PER_EYE {
                let th = 2.0 * PI * k as f32 / IRIS_POINTS_PER_EYE as f32;
                pts.push((ex + self.iris_r * th.cos(), ey + self.iris_r * th.sin()));
            }
        }
        pts
    }
}

const OUTLINE_DARKEN: f32 = 0.45;
const LESION_BASE: [f32; 3] = [0.72, 0.08, 0.20];

fn put(img: &mut Image, x: i32, y: i32, rgb: [f32; 3]) {
    let (_, h, w) = img.dim();
    if x < 0 || y < 0 || x >= w as i32 || y >= h as i32 {
        return;
    }
    for c in 0..3 {
        img[[c, y as usize, x as usize]] = rgb[c] * 2.0 - 1.0;
    }
}

fn pixel_color(img: &Image, x: usize, y: usize) -> [f32; 3] {
    [
        (img[[0, y, x]] + 1.0) / 2.0,
        (img[[1, y, x]] + 1.0) / 2.0,
        (img[[2, y, x]] + 1.0) / 2.0,
    ]
}

/// Render one view. The jitter/lesion rng must already be positioned for
/// this sample.
pub fn render_face<R: Rng>(
    geo: &FaceGeometry,
    diseased: bool,
    lesion_rng: &mut R,
) -> (Image, Array2<u8>) {
    let c = geo.canvas;
    let mut img = Image::zeros((3, c, c));
    // background gradient
    for y in 0..c {
        let g = 0.10 + 0.08 * (y as f32 / c as f32);
        for x in 0..c {
            put(&mut img, x as i32, y as i32, [g, g, g + 0.02]);
        }
    }
    // face ellipse with vertical shading
    for y in 0..c {
        for x in 0..c {
            let dx = (x as f32 + 0.5 - geo.cx) / geo.face_a;
            let dy = (y as f32 + 0.5 - geo.cy) / geo.face_b;
            if dx * dx + dy * dy <= 1.0 {
                let shade = 0.90 + 0.10 * (1.0 - dy.abs());
                put(
                    &mut img,
                    x as i32,
                    y as i32,
                    [
                        geo.skin[0] * shade,
                        geo.skin[1] * shade,
                        geo.skin[2] * shade,
                    ],
                );
            }
        }
    }
    // mouth: parabolic band
    let mouth_y = geo.cy + 0.45 * geo.face_b;
    let mouth_w = 0.35 * geo.face_a;
    let mouth_color = [0.55 * geo.skin[0], 0.18, 0.22];
    let steps = (mouth_w * 4.0) as i32;
    for s in -steps..=steps {
        let t = s as f32 / steps as f32; // [-1, 1]
        let x = geo.cx + t * mouth_w;
        let y = mouth_y + geo.mouth_curve * t * t * 4.0;
        for dy in 0..2 {
            put(&mut img, x.round() as i32, y.round() as i32 + dy, mouth_color);
        }
    }
    // nose: vertical stroke
    let nose_color = [geo.skin[0] * 0.72, geo.skin[1] * 0.72, geo.skin[2] * 0.72];
    let nose_top = geo.cy - 0.02 * geo.face_b;
    let mut y = nose_top;
    while y < nose_top + geo.nose_len {
        put(&mut img, geo.cx.round() as i32, y.round() as i32, nose_color);
        y += 1.0;
    }
    // eyes
    let sclera = [0.93, 0.93, 0.90];
    let outline = [
        geo.skin[0] * OUTLINE_DARKEN,
        geo.skin[1] * OUTLINE_DARKEN,
        geo.skin[2] * OUTLINE_DARKEN,
    ];
    for (ex, ey) in geo.eye_centers() {
        let x0 = (ex - geo.eyelid_w - 2.0).floor() as i32;
        let x1 = (ex + geo.eyelid_w + 2.0).ceil() as i32;
        let y0 = (ey - geo.eyelid_h - 2.0).floor() as i32;
        let y1 = (ey + geo.eyelid_h + 2.0).ceil() as i32;
        for yy in y0..=y1 {
            for xx in x0..=x1 {
                let px = xx as f32 + 0.5;
                let py = yy as f32 + 0.5;
                let dx = (px - ex) / geo.eyelid_w;
                let dy = (py - ey) / geo.eyelid_h;
                let e = dx * dx + dy * dy;
                if e <= 1.0 {
                    let d_iris = ((px - ex).powi(2) + (py - ey).powi(2)).sqrt();
                    if d_iris <= 0.35 * geo.iris_r {
                        put(&mut img, xx, yy, [0.02, 0.02, 0.02]); // pupil
                    } else if d_iris <= geo.iris_r {
                        put(&mut img, xx, yy, geo.iris_color);
                    } else {
                        put(&mut img, xx, yy, sclera);
                    }
                }
            }
        }
        // eyelid outline: pixels whose center is within half a pixel of
        // the analytic ellipse (distance approximated via the gradient).
        draw_ellipse_outline(&mut img, ex, ey, geo.eyelid_w, geo.eyelid_h, outline);
        // iris outline
        let iris_edge = [
            geo.iris_color[0] * 0.55,
            geo.iris_color[1] * 0.55,
            geo.iris_color[2] * 0.55,
        ];
        draw_ellipse_outline(&mut img, ex, ey, geo.iris_r, geo.iris_r, iris_edge);
        // brow: arc above the eye
        let brow_color = [geo.skin[0] * 0.30, geo.skin[1] * 0.30, geo.skin[2] * 0.30];
        let bw = geo.eyelid_w * 1.2;
        let bsteps = (bw * 4.0) as i32;
        for s in -bsteps..=bsteps {
            let t = s as f32 / bsteps as f32;
            let x = ex + t * bw;
            let yb = ey - geo.eyelid_h - geo.brow_gap - 1.5 * (1.0 - t * t);
            put(&mut img, x.round() as i32, yb.round() as i32, brow_color);
        }
    }
    // lesions
    let mut mask = Array2::<u8>::zeros((c, c));
    if diseased {
        paint_lesions(geo, &mut img, &mut mask, lesion_rng);
    }
    (img, mask)
}

/// Draw an ellipse boundary by marking pixels whose center lies within
/// half a pixel of the curve.
fn draw_ellipse_outline(img: &mut Image, ex: f32, ey: f32, a: f32, b: f32, color: [f32; 3]) {
    let x0 = (ex - a - 1.5).floor() as i32;
    let x1 = (ex + a + 1.5).ceil() as i32;
    let y0 = (ey - b - 1.5).floor() as i32;
    let y1 = (ey + b + 1.5).ceil() as i32;
    for yy in y0..=y1 {
        for xx in x0..=x1 {
            let px = xx as f32 + 0.5;
            let py = yy as f32 + 0.5;
            let fx = (px - ex) / a;
            let fy = (py - ey) / b;
            let f = fx * fx + fy * fy - 1.0;
            // |grad f| = 2 sqrt(fx^2/a^2 + fy^2/b^2); distance ~ |f|/|grad f|
            let grad = 2.0 * ((fx / a).powi(2) + (fy / b).powi(2)).sqrt();
            if grad > 0.0 && (f / grad).abs() <= 0.5 {
                put(img, xx, yy, color);
            }
        }
    }
}

fn paint_lesions<R: Rng>(
    geo: &FaceGeometry,
    img: &mut Image,
    mask: &mut Array2<u8>,
    rng: &mut R,
) {
    let c = geo.canvas;
    let n_extra = rng.gen_range(0..=2);
    let primary_eye = rng.gen_range(0..2usize);
    let mut blobs: Vec<(f32, f32, f32)> = Vec::new();
    // primary blob centered inside an eye box so the mask always
    // intersects the periocular region
    let (bx0, by0, bx1, by1) = geo.eye_bbox(primary_eye);
    blobs.push((
        bx0 + rng.gen::<f32>() * (bx1 - bx0),
        by0 + rng.gen::<f32>() * (by1 - by0),
        2.8 + rng.gen::<f32>() * 2.2,
    ));
    for _ in 0..n_extra {
        let eye = rng.gen_range(0..2usize);
        let (ex, ey) = geo.eye_centers()[eye];
        blobs.push((
            ex + (rng.gen::<f32>() - 0.5) * 6.0 * geo.eyelid_w,
            ey + (rng.gen::<f32>() - 0.5) * 5.0 * geo.eyelid_h,
            2.0 + rng.gen::<f32>() * 2.5,
        ));
    }
    loop {
        for &(lx, ly, r) in &blobs {
            paint_blob(img, mask, lx, ly, r, c, rng);
        }
        // postcondition: at least 16 lesion pixels inside an eye box
        let mut hits = 0usize;
        for eye in 0..2 {
            let (x0, y0, x1, y1) = geo.eye_bbox(eye);
            for yy in y0.floor().max(0.0) as usize..(y1.ceil() as usize).min(c) {
                for xx in x0.floor().max(0.0) as usize..(x1.ceil() as usize).min(c) {
                    if mask[[yy, xx]] != 0 {
                        hits += 1;
                    }
                }
            }
        }
        if hits >= 16 {
            break;
        }
        // fallback: one more blob dead on the primary eye center
        let (ex, ey) = geo.eye_centers()[primary_eye];
        blobs = vec![(ex, ey, 3.2)];
    }
}

fn paint_blob<R: Rng>(
    img: &mut Image,
    mask: &mut Array2<u8>,
    lx: f32,
    ly: f32,
    r: f32,
    canvas: usize,
    rng: &mut R,
) {
    // radial wobble makes the boundary irregular
    let mut wobble = [0.0f32; 12];
    for w in wobble.iter_mut() {
        *w = rng.gen::<f32>() * 0.5 - 0.25;
    }
    let x0 = ((lx - r * 1.4).floor() as i32).max(0);
    let x1 = ((lx + r * 1.4).ceil() as i32).min(canvas as i32 - 1);
    let y0 = ((ly - r * 1.4).floor() as i32).max(0);
    let y1 = ((ly + r * 1.4).ceil() as i32).min(canvas as i32 - 1);
    for yy in y0..=y1 {
        for xx in x0..=x1 {
            let px = xx as f32 + 0.5;
            let py = yy as f32 + 0.5;
            let d = ((px - lx).powi(2) + (py - ly).powi(2)).sqrt();
            let ang = (py - ly).atan2(px - lx);
            let k = ((ang + PI) / (2.0 * PI) * 12.0) as usize % 12;
            let r_here = r * (1.0 + wobble[k]);
            if d <= r_here {
                let speckle = rng.gen::<f32>() * 0.35 - 0.175;
                let col = [
                    (LESION_BASE[0] + speckle).clamp(0.0, 1.0),
                    (LESION_BASE[1] + speckle * 0.4).clamp(0.0, 1.0),
                    (LESION_BASE[2] + speckle * 0.6).clamp(0.0, 1.0),
                ];
                put(img, xx, yy, col);
                mask[[yy as usize, xx as usize]] = 1;
            }
        }
    }
}

/// Deterministic sample generation. Identity appearance comes from
/// `identity_id`; `seed` drives only view jitter and lesions.
pub fn generate_sample(
    seed: u64,
    identity_id: u32,
    diseased: bool,
    canvas: usize,
) -> Result<SyntheticSample> {
    let params = IdentityParams::derive(identity_id);
    let mut view_rng = substream_indexed(seed, "view-jitter", identity_id as u64);
    let geo = FaceGeometry::resolve(&params, canvas, Some(&mut view_rng))?;
    let mut lesion_rng = substream_indexed(seed, "lesion", identity_id as u64);
    let (image, lesion_mask) = render_face(&geo, diseased, &mut lesion_rng);
    Ok(SyntheticSample {
        image,
        lesion_mask,
        identity_id,
        params,
        label: u8::from(diseased),
        landmarks: geo.landmarks(),
    })
}

/// Canonical (jitter-free, lesion-free) view of an identity.
pub fn generate_canonical(identity_id: u32, canvas: usize) -> Result<SyntheticSample> {
    let params = IdentityParams::derive(identity_id);
    let geo = FaceGeometry::resolve::<rand_chacha::ChaCha12Rng>(&params, canvas, None)?;
    let mut lesion_rng = substream_indexed(0, "lesion-canonical", identity_id as u64);
    let (image, lesion_mask) = render_face(&geo, false, &mut lesion_rng);
    Ok(SyntheticSample {
        image,
        lesion_mask,
        identity_id,
        params,
        label: 0,
        landmarks: geo.landmarks(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub sample_id: u64,
    pub identity_id: u32,
    pub view: u32,
    pub label: u8,
    pub split: Split,
    pub landmarks: Vec<(f32, f32)>,
    pub params: IdentityParams,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub canvas: usize,
    pub n_identities: usize,
    pub views_per_identity: usize,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn identities_in(&self, split: Split) -> Vec<u32> {
        let mut ids: Vec<u32> = self.records_in(split).map(|r| r.identity_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn image_path(&self, sample_id: u64) -> PathBuf {
        self.root.join("images").join(format!("{sample_id}.png"))
    }

    pub fn mask_path(&self, sample_id: u64) -> PathBuf {
        self.root.join("masks").join(format!("{sample_id}.png"))
    }

    pub fn load_image(&self, sample_id: u64) -> Result<Image> {
        imageio::read_png(&self.image_path(sample_id))
    }

    pub fn load_mask(&self, sample_id: u64) -> Result<Array2<u8>> {
        imageio::read_mask_png(&self.mask_path(sample_id))
    }

    /// Gallery renderings for one identity: lesion-free frontal views,
    /// view 0 in canonical pose.
    pub fn render_gallery(&self, identity_id: u32, n_views: usize) -> Result<Vec<Image>> {
        if identity_id as usize >= self.n_identities {
            return Err(Error::Lookup(format!(
                "identity {identity_id} not in dataset of {}",
                self.n_identities
            )));
        }
        render_gallery_views(identity_id, n_views, self.canvas)
    }
}

/// Gallery views independent of a dataset (identity params are global).
pub fn render_gallery_views(identity_id: u32, n_views: usize, canvas: usize) -> Result<Vec<Image>> {
    let params = IdentityParams::derive(identity_id);
    let mut out = Vec::with_capacity(n_views);
    for v in 0..n_views {
        let sample = if v == 0 {
            let geo = FaceGeometry::resolve::<rand_chacha::ChaCha12Rng>(&params, canvas, None)?;
            let mut lesion_rng = substream_indexed(0, "gallery-lesion", identity_id as u64);
            let (image, _) = render_face(&geo, false, &mut lesion_rng);
            image
        } else {
            let mut view_rng =
                substream_indexed(0x9a11e47 + v as u64, "gallery-jitter", identity_id as u64);
            let geo = FaceGeometry::resolve(&params, canvas, Some(&mut view_rng))?;
            let mut lesion_rng =
                substream_indexed(0x9a11e47 + v as u64, "gallery-lesion", identity_id as u64);
            let (image, _) = render_face(&geo, false, &mut lesion_rng);
            image
        };
        out.push(sample);
    }
    Ok(out)
}

/// Generate the full dataset on disk: `images/`, `masks/`, `gallery/`,
/// and `manifest.jsonl`. Splits are identity-disjoint.
pub fn build_dataset(cfg: &RunConfig, out_dir: &Path) -> Result<DatasetManifest> {
    let d = &cfg.dataset;
    std::fs::create_dir_all(out_dir.join("images"))?;
    std::fs::create_dir_all(out_dir.join("masks"))?;
    std::fs::create_dir_all(out_dir.join("gallery").join("images"))?;

    // identity-disjoint split assignment
    let (n_train, n_val, _) = cfg.split_counts();
    let mut ids: Vec<u32> = (0..d.n_identities as u32).collect();
    let mut split_rng = substream(cfg.seed, "splits");
    // Fisher-Yates
    for i in (1..ids.len()).rev() {
        let j = split_rng.gen_range(0..=i);
        ids.swap(i, j);
    }
    let split_of = |identity: u32| -> Split {
        let pos = ids.iter().position(|&x| x == identity).unwrap();
        if pos < n_train {
            Split::Train
        } else if pos < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        }
    };

    let mut disease_rng = substream(cfg.seed, "disease-labels");
    let mut records = Vec::new();
    for identity in 0..d.n_identities as u32 {
        for view in 0..d.views_per_identity as u32 {
            let sample_id = identity as u64 * d.views_per_identity as u64 + view as u64;
            let diseased = disease_rng.gen::<f64>() < d.disease_fraction;
            let seed = sample_seed(cfg.seed, sample_id);
            let sample = generate_sample(seed, identity, diseased, d.canvas)?;
            imageio::write_png(&sample.image, &out_dir.join("images").join(format!("{sample_id}.png")))?;
            imageio::write_mask_png(
                &sample.lesion_mask,
                &out_dir.join("masks").join(format!("{sample_id}.png")),
            )?;
            records.push(ManifestRecord {
                sample_id,
                identity_id: identity,
                view,
                label: sample.label,
                split: split_of(identity),
                landmarks: sample.landmarks,
                params: sample.params,
            });
        }
    }

    // gallery for every identity
    for identity in 0..d.n_identities as u32 {
        let views = render_gallery_views(identity, cfg.eval.gallery_views, d.canvas)?;
        for (v, img) in views.iter().enumerate() {
            imageio::write_png(
                img,
                &out_dir
                    .join("gallery")
                    .join("images")
                    .join(format!("{identity}_{v}.png")),
            )?;
        }
    }

    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        canvas: d.canvas,
        n_identities: d.n_identities,
        views_per_identity: d.views_per_identity,
        records,
    };
    write_manifest(&manifest, &out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

fn sample_seed(root: u64, sample_id: u64) -> u64 {
    let mut rng = substream_indexed(root, "datagen-sample", sample_id);
    rng.gen()
}

fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header = serde_json::json!({
        "kind": "header",
        "canvas": manifest.canvas,
        "n_identities": manifest.n_identities,
        "views_per_identity": manifest.views_per_identity,
    });
    writeln!(f, "{header}")?;
    for r in &manifest.records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.jsonl");
    let f = std::io::BufReader::new(std::fs::File::open(&path).map_err(|e| {
        Error::Lookup(format!("manifest {}: {e}", path.display()))
    })?);
    let mut lines = f.lines();
    let header: serde_json::Value = serde_json::from_str(
        &lines
            .next()
            .ok_or_else(|| Error::Format("empty manifest".into()))??,
    )?;
    let mut records = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(DatasetManifest {
        root: dir.to_path_buf(),
        canvas: header["canvas"].as_u64().unwrap_or(64) as usize,
        n_identities: header["n_identities"].as_u64().unwrap_or(0) as usize,
        views_per_identity: header["views_per_identity"].as_u64().unwrap_or(0) as usize,
        records,
    })
}

/// Dataset loaded fully into memory for training loops.
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub images: Vec<Image>,
    pub masks: Vec<Array2<u8>>,
}

impl LoadedDataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = load_manifest(dir)?;
        let mut images = Vec::with_capacity(manifest.records.len());
        let mut masks = Vec::with_capacity(manifest.records.len());
        for r in &manifest.records {
            images.push(manifest.load_image(r.sample_id)?);
            masks.push(manifest.load_mask(r.sample_id)?);
        }
        Ok(LoadedDataset {
            manifest,
            images,
            masks,
        })
    }

    pub fn indices_in(&self, split: Split) -> Vec<usize> {
        self.manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }
}
