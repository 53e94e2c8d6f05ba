//! Dense keypoint fields: per-pixel `(part, uv)` on the foreground, nothing on
//! the background.

use std::io::{Read, Write};

use nalgebra::{Matrix2, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

/// Foreground parts in the DensePose convention (background excluded).
pub const DEFAULT_PART_COUNT: u32 = 24;

/// Penalty charged by [`field_l1`] for a pixel whose part labels disagree:
/// the L1 diameter of the unit chart.
pub const PART_MISMATCH_PENALTY: f64 = 2.0;

const DUMP_MAGIC: &[u8; 4] = b"DEPI";
const DUMP_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("pixel ({0}, {1}) is background")]
    Background(u32, u32),
    #[error("pixel ({0}, {1}) is outside the {2}x{3} field")]
    OutOfBounds(u32, u32, u32, u32),
    #[error("field shapes differ: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(u32, u32, u32, u32),
    #[error("foreground masks differ")]
    MaskMismatch,
    #[error("uv transform is singular (det {0:e})")]
    SingularTransform(f64),
    #[error("part {0} out of range for {1} parts")]
    PartOutOfRange(u8, u32),
    #[error("malformed field dump: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Integer pixel location; its image coordinate is its centre `(x, y)`.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
pub struct PixelCoord {
    pub x: u32,
    pub y: u32,
}

impl PixelCoord {
    pub fn new(x: u32, y: u32) -> Self {
        Self { x, y }
    }

    pub fn to_image(self) -> Vector2<f64> {
        Vector2::new(self.x as f64, self.y as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub part: u8,
    pub uv: Vector2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseField {
    width: u32,
    height: u32,
    parts: u32,
    pixels: Vec<Option<Keypoint>>,
}

impl DenseField {
    /// An all-background field.
    pub fn new(width: u32, height: u32) -> Self {
        Self::with_part_count(width, height, DEFAULT_PART_COUNT)
    }

    pub fn with_part_count(width: u32, height: u32, parts: u32) -> Self {
        Self {
            width,
            height,
            parts,
            pixels: vec![None; width as usize * height as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn part_count(&self) -> u32 {
        self.parts
    }

    fn index(&self, p: PixelCoord) -> Result<usize, FieldError> {
        if p.x >= self.width || p.y >= self.height {
            return Err(FieldError::OutOfBounds(p.x, p.y, self.width, self.height));
        }
        Ok(p.y as usize * self.width as usize + p.x as usize)
    }

    pub fn set(&mut self, p: PixelCoord, keypoint: Option<Keypoint>) -> Result<(), FieldError> {
        if let Some(k) = &keypoint {
            if k.part as u32 >= self.parts {
                return Err(FieldError::PartOutOfRange(k.part, self.parts));
            }
        }
        let idx = self.index(p)?;
        self.pixels[idx] = keypoint;
        Ok(())
    }

    pub fn get(&self, p: PixelCoord) -> Result<&Keypoint, FieldError> {
        self.pixels[self.index(p)?]
            .as_ref()
            .ok_or(FieldError::Background(p.x, p.y))
    }

    pub fn is_foreground(&self, p: PixelCoord) -> bool {
        self.index(p)
            .map(|i| self.pixels[i].is_some())
            .unwrap_or(false)
    }

    /// Row-major iterator over foreground pixels.
    pub fn foreground(&self) -> impl Iterator<Item = (PixelCoord, &Keypoint)> + '_ {
        let w = self.width as usize;
        self.pixels.iter().enumerate().filter_map(move |(i, k)| {
            k.as_ref()
                .map(|k| (PixelCoord::new((i % w) as u32, (i / w) as u32), k))
        })
    }

    pub fn foreground_count(&self) -> usize {
        self.pixels.iter().filter(|p| p.is_some()).count()
    }

    /// UV coordinates of the foreground in row-major order.
    pub fn foreground_uvs(&self) -> Vec<Vector2<f64>> {
        self.foreground().map(|(_, k)| k.uv).collect()
    }

    pub fn foreground_parts(&self) -> Vec<u8> {
        self.foreground().map(|(_, k)| k.part).collect()
    }

    /// Copy with the foreground UVs replaced, in row-major order. Panics if
    /// the count does not match.
    pub fn with_foreground_uvs(&self, uvs: &[Vector2<f64>]) -> DenseField {
        assert_eq!(
            uvs.len(),
            self.foreground_count(),
            "uv count must match the foreground"
        );
        let mut out = self.clone();
        for (k, uv) in out.pixels.iter_mut().flatten().zip(uvs) {
            k.uv = *uv;
        }
        out
    }

    /// Copy that keeps only the first `n` foreground pixels (row-major).
    pub fn truncate_foreground(&self, n: usize) -> DenseField {
        let mut out = self.clone();
        let mut seen = 0;
        for p in out.pixels.iter_mut() {
            if p.is_some() {
                if seen >= n {
                    *p = None;
                }
                seen += 1;
            }
        }
        out
    }

    pub fn same_mask(&self, other: &DenseField) -> Result<(), FieldError> {
        if self.width != other.width || self.height != other.height {
            return Err(FieldError::ShapeMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        let same = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .all(|(a, b)| a.is_some() == b.is_some());
        if same {
            Ok(())
        } else {
            Err(FieldError::MaskMismatch)
        }
    }

    /// Mean Euclidean UV distance to `other` over the shared foreground.
    pub fn mean_uv_error(&self, other: &DenseField) -> Result<f64, FieldError> {
        self.same_mask(other)?;
        let n = self.foreground_count();
        if n == 0 {
            return Ok(0.0);
        }
        let total: f64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .filter_map(|(a, b)| Some((a.as_ref()?.uv - b.as_ref()?.uv).norm()))
            .sum();
        Ok(total / n as f64)
    }
}

/// Row-major foreground pixels, optionally restricted to one part.
pub fn foreground_pixels(field: &DenseField, part: Option<u8>) -> Vec<PixelCoord> {
    field
        .foreground()
        .filter(|(_, k)| part.is_none_or(|p| k.part == p))
        .map(|(p, _)| p)
        .collect()
}

/// Affine map `uv ↦ A uv + b` on chart coordinates.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UvTransform {
    pub a: Matrix2<f64>,
    pub b: Vector2<f64>,
}

impl UvTransform {
    pub fn new(a: Matrix2<f64>, b: Vector2<f64>) -> Result<Self, FieldError> {
        let det = a.determinant();
        if !(det.abs() > 1e-12) {
            return Err(FieldError::SingularTransform(det));
        }
        Ok(Self { a, b })
    }

    pub fn identity() -> Self {
        Self {
            a: Matrix2::identity(),
            b: Vector2::zeros(),
        }
    }

    /// Rotation by `angle` radians about `center`.
    pub fn rotation_about(angle: f64, center: Vector2<f64>) -> Self {
        let (s, c) = angle.sin_cos();
        let a = Matrix2::new(c, -s, s, c);
        Self {
            a,
            b: center - a * center,
        }
    }

    pub fn apply(&self, uv: &Vector2<f64>) -> Vector2<f64> {
        self.a * uv + self.b
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &UvTransform) -> UvTransform {
        UvTransform {
            a: self.a * other.a,
            b: self.a * other.b + self.b,
        }
    }

    /// Whether `A` is orthogonal (a rotation or reflection).
    pub fn is_rigid(&self) -> bool {
        (self.a.transpose() * self.a - Matrix2::identity()).amax() < 1e-12
    }
}

pub fn apply_uv_transform(field: &DenseField, t: &UvTransform) -> Result<DenseField, FieldError> {
    let det = t.a.determinant();
    if !(det.abs() > 1e-12) {
        return Err(FieldError::SingularTransform(det));
    }
    let mut out = field.clone();
    for k in out.pixels.iter_mut().flatten() {
        k.uv = t.apply(&k.uv);
    }
    Ok(out)
}

/// Adds N(0, stddev²) noise to every foreground UV component, then clamps to
/// the unit chart. Draws happen in row-major order, u before v.
pub fn perturb_field(field: &DenseField, stddev: f64, seed: u64) -> DenseField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perturb_field_with(field, stddev, &mut rng)
}

pub fn perturb_field_with(field: &DenseField, stddev: f64, rng: &mut ChaCha8Rng) -> DenseField {
    let mut out = field.clone();
    if stddev == 0.0 {
        return out;
    }
    let normal = Normal::new(0.0, stddev).expect("finite non-negative stddev");
    for k in out.pixels.iter_mut().flatten() {
        let du = normal.sample(rng);
        let dv = normal.sample(rng);
        k.uv = Vector2::new((k.uv.x + du).clamp(0.0, 1.0), (k.uv.y + dv).clamp(0.0, 1.0));
    }
    out
}

/// Sum of per-pixel L1 UV differences; pixels with disagreeing parts cost
/// [`PART_MISMATCH_PENALTY`].
pub fn field_l1(f: &DenseField, g: &DenseField) -> Result<f64, FieldError> {
    f.same_mask(g)?;
    Ok(f.pixels
        .iter()
        .zip(&g.pixels)
        .filter_map(|(a, b)| {
            let (a, b) = (a.as_ref()?, b.as_ref()?);
            Some(if a.part == b.part {
                (a.uv - b.uv).abs().sum()
            } else {
                PART_MISMATCH_PENALTY
            })
        })
        .sum())
}

fn read_u32(r: &mut impl Read) -> Result<u32, FieldError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Binary dump: `"DEPI"`, version, width, height, part count (u32 LE), then
/// one `{fg u8, part u8, u f32, v f32}` record per pixel, row-major.
pub fn write_field_dump(field: &DenseField, w: &mut impl Write) -> Result<(), FieldError> {
    w.write_all(DUMP_MAGIC)?;
    for v in [DUMP_VERSION, field.width, field.height, field.parts] {
        w.write_all(&v.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(field.pixels.len() * 10);
    for p in &field.pixels {
        match p {
            Some(k) => {
                buf.push(1);
                buf.push(k.part);
                buf.extend_from_slice(&(k.uv.x as f32).to_le_bytes());
                buf.extend_from_slice(&(k.uv.y as f32).to_le_bytes());
            }
            None => buf.extend_from_slice(&[0u8; 10]),
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_field_dump(r: &mut impl Read) -> Result<DenseField, FieldError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(FieldError::Format("bad magic".into()));
    }
    let version = read_u32(r)?;
    if version != DUMP_VERSION {
        return Err(FieldError::Format(format!("unsupported version {version}")));
    }
    let width = read_u32(r)?;
    let height = read_u32(r)?;
    let parts = read_u32(r)?;
    let n = width as usize * height as usize;
    let mut buf = vec![0u8; n * 10];
    r.read_exact(&mut buf)
        .map_err(|_| FieldError::Format("truncated pixel records".into()))?;
    let mut field = DenseField::with_part_count(width, height, parts);
    for (i, rec) in buf.chunks_exact(10).enumerate() {
        match rec[0] {
            0 => {}
            1 => {
                let u = f32::from_le_bytes(rec[2..6].try_into().unwrap());
                let v = f32::from_le_bytes(rec[6..10].try_into().unwrap());
                if rec[1] as u32 >= parts {
                    return Err(FieldError::PartOutOfRange(rec[1], parts));
                }
                field.pixels[i] = Some(Keypoint {
                    part: rec[1],
                    uv: Vector2::new(u as f64, v as f64),
                });
            }
            other => return Err(FieldError::Format(format!("bad foreground flag {other}"))),
        }
    }
    Ok(field)
}

/// Lossless text form: a `# width height parts` line, then `x,y,part,u,v`
/// per foreground pixel.
pub fn write_field_csv(field: &DenseField, w: &mut impl Write) -> Result<(), FieldError> {
    writeln!(w, "# {} {} {}", field.width, field.height, field.parts)?;
    writeln!(w, "x,y,part,u,v")?;
    for (p, k) in field.foreground() {
        writeln!(w, "{},{},{},{:?},{:?}", p.x, p.y, k.part, k.uv.x, k.uv.y)?;
    }
    Ok(())
}

pub fn read_field_csv(r: &mut impl Read) -> Result<DenseField, FieldError> {
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .and_then(|l| l.strip_prefix("# "))
        .ok_or_else(|| FieldError::Format("missing size header".into()))?;
    let dims: Vec<u32> = header
        .split_whitespace()
        .map(|s| {
            s.parse()
                .map_err(|_| FieldError::Format(format!("bad header {header:?}")))
        })
        .collect::<Result<_, _>>()?;
    let [width, height, parts] = dims[..] else {
        return Err(FieldError::Format(format!("bad header {header:?}")));
    };
    let mut field = DenseField::with_part_count(width, height, parts);
    for line in lines.skip(1).filter(|l| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        let bad = || FieldError::Format(format!("bad row {line:?}"));
        if cols.len() != 5 {
            return Err(bad());
        }
        let x: u32 = cols[0].parse().map_err(|_| bad())?;
        let y: u32 = cols[1].parse().map_err(|_| bad())?;
        let part: u8 = cols[2].parse().map_err(|_| bad())?;
        let u: f64 = cols[3].parse().map_err(|_| bad())?;
        let v: f64 = cols[4].parse().map_err(|_| bad())?;
        field.set(
            PixelCoord::new(x, y),
            Some(Keypoint {
                part,
                uv: Vector2::new(u, v),
            }),
        )?;
    }
    Ok(field)
}
