//! On-disk formats. All multi-byte fields are little-endian.
//!
//! | file       | layout                                                          |
//! |------------|-----------------------------------------------------------------|
//! | image f32  | `IMGF`, u32 width, u32 height, u32 channels, f32 row-major data |
//! | image PGM  | `P5` binary 8-bit grayscale, values clamped from `[0, 1]`       |
//! | overlay    | `P6` binary RGB: warped in red and blue, target in green        |
//! | DVF        | `DVF2`, u32 width, u32 height, interleaved `(uy, ux)` f32 pairs |
//! | checkpoint | `C2WP`, u32 version, config, named f32 tensor records           |
//! | metrics    | JSON                                                            |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::BnMode;
use crate::metrics::Metrics;
use crate::model::{ModelConfig, ModelParams};
use crate::sampling::{Dvf, KernelKind};
use crate::tensor::{Shape, Tensor};

pub const IMAGE_MAGIC: &[u8; 4] = b"IMGF";
pub const DVF_MAGIC: &[u8; 4] = b"DVF2";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"C2WP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Bounds-checked little-endian cursor.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated {
                expected: self.pos.saturating_add(n),
                found: self.buf.len(),
            }),
        }
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let found = self.take(4).map_err(|_| Error::BadMagic {
            expected: String::from_utf8_lossy(expected).into_owned(),
            found: String::from_utf8_lossy(self.buf).into_owned(),
        })?;
        if found != expected {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| Error::Malformed(format!("{n} values overflow")))?;
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Malformed(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Malformed(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn extent(v: usize, what: &str) -> Result<usize> {
    if v == 0 {
        return Err(Error::Malformed(format!("zero {what}")));
    }
    Ok(v)
}

pub fn encode_image(image: &Tensor) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + 4 * image.len());
    out.extend_from_slice(IMAGE_MAGIC);
    put_u32(&mut out, image.width())?;
    put_u32(&mut out, image.height())?;
    put_u32(&mut out, image.channels())?;
    put_f32s(&mut out, image.values());
    Ok(out)
}

pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes);
    r.magic(IMAGE_MAGIC)?;
    let w = extent(r.usize()?, "width")?;
    let h = extent(r.usize()?, "height")?;
    let c = extent(r.usize()?, "channel count")?;
    let shape = Shape::new(c, h, w)?;
    let values = r.f32s(shape.len())?;
    r.finish()?;
    Tensor::from_vec(shape, values)
}

pub fn encode_dvf(u: &Dvf) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + 8 * u.uy().len());
    out.extend_from_slice(DVF_MAGIC);
    put_u32(&mut out, u.width())?;
    put_u32(&mut out, u.height())?;
    for (y, x) in u.uy().iter().zip(u.ux()) {
        put_f32s(&mut out, &[*y, *x]);
    }
    Ok(out)
}

pub fn decode_dvf(bytes: &[u8]) -> Result<Dvf> {
    let mut r = Reader::new(bytes);
    r.magic(DVF_MAGIC)?;
    let w = extent(r.usize()?, "width")?;
    let h = extent(r.usize()?, "height")?;
    let pairs = r.f32s(h.checked_mul(w).and_then(|n| n.checked_mul(2)).ok_or_else(|| {
        Error::Malformed(format!("{w}x{h} field overflows"))
    })?)?;
    r.finish()?;
    let mut u = Dvf::zeros(h, w);
    let t = u.tensor_mut();
    for (i, p) in pairs.chunks_exact(2).enumerate() {
        t.channel_mut(0)[i] = p[0];
        t.channel_mut(1)[i] = p[1];
    }
    Ok(u)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit binary PGM of channel 0, intensities clamped to `[0, 1]`.
pub fn encode_pgm(image: &Tensor) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.channel(0).iter().map(|&v| to_byte(v)));
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    let (header, data) = parse_netpbm(bytes, b"P5")?;
    let [w, h, max] = header;
    if max != 255 {
        return Err(Error::Malformed(format!("unsupported PGM maxval {max}")));
    }
    let mut r = Reader::new(data);
    let raw = r.take(w * h)?;
    r.finish()?;
    Tensor::from_vec(Shape::new(1, h, w)?, raw.iter().map(|&b| b as f64 / 255.0).collect())
}

/// Width, height and maxval of a binary netpbm header, plus the raster.
fn parse_netpbm<'a>(bytes: &'a [u8], magic: &[u8; 2]) -> Result<([usize; 3], &'a [u8])> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned(),
        });
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Malformed("bad netpbm header".into()))?;
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Truncated {
            expected: pos + 1,
            found: bytes.len(),
        });
    }
    if fields[0] == 0 || fields[1] == 0 {
        return Err(Error::Malformed("zero image extent".into()));
    }
    Ok((fields, &bytes[pos + 1..]))
}

/// Magenta/green overlay: the warped image drives red and blue, the target
/// drives green, so aligned structure appears gray.
pub fn encode_overlay(warped: &Tensor, target: &Tensor) -> Result<Vec<u8>> {
    warped.ensure_same_shape(target, "overlay inputs")?;
    let mut out = format!("P6\n{} {}\n255\n", warped.width(), warped.height()).into_bytes();
    for (&w, &t) in warped.channel(0).iter().zip(target.channel(0)) {
        let (m, g) = (to_byte(w), to_byte(t));
        out.extend_from_slice(&[m, g, m]);
    }
    Ok(out)
}

pub fn encode_checkpoint(params: &ModelParams) -> Result<Vec<u8>> {
    let c = params.config();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut out, c.levels)?;
    put_u32(&mut out, c.channels.len())?;
    for &(i, o) in &c.channels {
        put_u32(&mut out, i)?;
        put_u32(&mut out, o)?;
    }
    put_u32(&mut out, c.kernel)?;
    put_u32(&mut out, c.deformable.len())?;
    for &d in &c.deformable {
        put_u32(&mut out, d)?;
    }
    out.push(c.image_warp_kernel.code());
    out.push(c.dvf_kernel.code());
    out.extend_from_slice(&c.bn_eps.to_le_bytes());
    out.extend_from_slice(&c.bn_momentum.to_le_bytes());

    let tensors = params.named_tensors();
    let stats = params.named_running_stats();
    put_u32(&mut out, tensors.len() + stats.len())?;
    let mut record = |name: &str, dims: &[usize], values: &[f64]| -> Result<()> {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, dims.len())?;
        for &d in dims {
            put_u32(&mut out, d)?;
        }
        put_f32s(&mut out, values);
        Ok(())
    };
    for (name, t) in &tensors {
        let s = t.shape();
        record(name, &[s.channels, s.height, s.width], t.values())?;
    }
    for (name, v) in &stats {
        record(name, &[v.len()], v)?;
    }
    Ok(out)
}

fn kernel_from_code(code: u8) -> Result<KernelKind> {
    KernelKind::from_code(code).ok_or_else(|| Error::Checkpoint(format!("unknown kernel code {code}")))
}

/// Rebuilds the model described by the checkpoint; batch norm is left in
/// inference mode.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let levels = r.usize()?;
    let n_layers = r.usize()?;
    let mut channels = Vec::new();
    for _ in 0..n_layers {
        channels.push((r.usize()?, r.usize()?));
    }
    let kernel = r.usize()?;
    let n_def = r.usize()?;
    let mut deformable = Vec::new();
    for _ in 0..n_def {
        deformable.push(r.usize()?);
    }
    let config = ModelConfig {
        levels,
        channels,
        kernel,
        deformable,
        image_warp_kernel: kernel_from_code(r.u8()?)?,
        dvf_kernel: kernel_from_code(r.u8()?)?,
        bn_eps: r.f64()?,
        bn_momentum: r.f64()?,
    };
    let mut params = ModelParams::init(config, 0).map_err(|e| Error::Checkpoint(format!("invalid config: {e}")))?;

    let n_records = r.usize()?;
    let mut records = Vec::with_capacity(n_records.min(1024));
    for _ in 0..n_records {
        let name_len = r.usize()?;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
        let ndims = r.usize()?;
        let mut dims = Vec::with_capacity(ndims.min(8));
        for _ in 0..ndims {
            dims.push(r.usize()?);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: dims overflow")))?;
        records.push((name, dims, r.f32s(n)?));
    }
    r.finish()?;

    let expected_tensors: Vec<(String, Vec<usize>)> = params
        .named_tensors()
        .iter()
        .map(|(n, t)| {
            let s = t.shape();
            (n.clone(), vec![s.channels, s.height, s.width])
        })
        .collect();
    let expected_stats: Vec<(String, Vec<usize>)> = params
        .named_running_stats()
        .iter()
        .map(|(n, v)| (n.clone(), vec![v.len()]))
        .collect();
    if records.len() != expected_tensors.len() + expected_stats.len() {
        return Err(Error::Checkpoint(format!(
            "{} records, config implies {}",
            records.len(),
            expected_tensors.len() + expected_stats.len()
        )));
    }
    let (tensor_recs, stat_recs) = records.split_at(expected_tensors.len());
    for ((name, dims, _), (en, ed)) in records.iter().zip(expected_tensors.iter().chain(&expected_stats)) {
        if name != en || dims != ed {
            return Err(Error::Checkpoint(format!(
                "record {name} {dims:?} does not match expected {en} {ed:?}"
            )));
        }
    }
    for (t, (_, _, v)) in params.tensors_mut().into_iter().zip(tensor_recs) {
        t.values_mut().copy_from_slice(v);
    }
    for (s, (_, _, v)) in params.running_stats_mut().into_iter().zip(stat_recs) {
        s.copy_from_slice(v);
    }
    params.set_mode(BnMode::Infer);
    Ok(params)
}

/// Rounds every stored value to f32, so a model equals its own decoded
/// checkpoint.
pub fn quantize_to_f32(params: &mut ModelParams) {
    for t in params.tensors_mut() {
        for v in t.values_mut() {
            *v = *v as f32 as f64;
        }
    }
    for s in params.running_stats_mut() {
        for v in s.iter_mut() {
            *v = *v as f32 as f64;
        }
    }
}

pub fn encode_metrics(m: &[Metrics]) -> Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(m).map_err(|e| Error::Malformed(e.to_string()))?;
    s.push(b'\n');
    Ok(s)
}

pub fn decode_metrics(bytes: &[u8]) -> Result<Vec<Metrics>> {
    serde_json::from_slice(bytes).map_err(|e| Error::Malformed(e.to_string()))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    Ok(fs::read(path)?)
}

pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    Ok(fs::write(path, encode_image(image)?)?)
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    decode_image(&read(path)?)
}

pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    Ok(fs::write(path, encode_pgm(image))?)
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    decode_pgm(&read(path)?)
}

/// Reads a `.pgm` as 8-bit grayscale and anything else as IMGF.
pub fn read_any_image(path: &Path) -> Result<Tensor> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("pgm") => read_pgm(path),
        _ => read_image(path),
    }
}

pub fn write_overlay(path: &Path, warped: &Tensor, target: &Tensor) -> Result<()> {
    Ok(fs::write(path, encode_overlay(warped, target)?)?)
}

pub fn write_dvf(path: &Path, u: &Dvf) -> Result<()> {
    Ok(fs::write(path, encode_dvf(u)?)?)
}

pub fn read_dvf(path: &Path) -> Result<Dvf> {
    decode_dvf(&read(path)?)
}

pub fn write_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    Ok(fs::write(path, encode_checkpoint(params)?)?)
}

pub fn read_checkpoint(path: &Path) -> Result<ModelParams> {
    decode_checkpoint(&read(path)?)
}

pub fn write_metrics(path: &Path, m: &[Metrics]) -> Result<()> {
    Ok(fs::write(path, encode_metrics(m)?)?)
}

pub fn read_metrics(path: &Path) -> Result<Vec<Metrics>> {
    decode_metrics(&read(path)?)
}

/// Pair stored in a dataset directory as `<name>_source.imgf`,
/// `<name>_target.imgf` and, when known, `<name>_dvf.dvf`.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredPair {
    pub name: String,
    pub source: Tensor,
    pub target: Tensor,
    pub dvf: Option<Dvf>,
}

pub fn pair_name(index: usize) -> String {
    format!("pair_{index:04}")
}

pub fn write_pair(dir: &Path, name: &str, source: &Tensor, target: &Tensor, dvf: Option<&Dvf>) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_image(&dir.join(format!("{name}_source.imgf")), source)?;
    write_image(&dir.join(format!("{name}_target.imgf")), target)?;
    if let Some(u) = dvf {
        write_dvf(&dir.join(format!("{name}_dvf.dvf")), u)?;
    }
    Ok(())
}

/// Every pair in `dir`, sorted by name.
pub fn read_dataset(dir: &Path) -> Result<Vec<StoredPair>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir)? {
        let file = entry?.file_name();
        if let Some(stem) = file.to_str().and_then(|f| f.strip_suffix("_source.imgf")) {
            names.push(stem.to_string());
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(Error::Config(format!("no *_source.imgf files in {}", dir.display())));
    }
    names
        .into_iter()
        .map(|name| {
            let source = read_image(&dir.join(format!("{name}_source.imgf")))?;
            let target = read_image(&dir.join(format!("{name}_target.imgf")))?;
            let dvf_path = dir.join(format!("{name}_dvf.dvf"));
            let dvf = if dvf_path.exists() { Some(read_dvf(&dvf_path)?) } else { None };
            Ok(StoredPair {
                name,
                source,
                target,
                dvf,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::LossBreakdown;
    use proptest::prelude::*;

    fn f32_values(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), n).prop_map(|v| v.into_iter().map(|x| x as f64).collect())
    }

    #[test]
    fn image_layout() {
        let t = Tensor::from_vec(Shape::new(1, 2, 2).unwrap(), vec![0.0, 0.5, 1.0, 0.25]).unwrap();
        let b = encode_image(&t).unwrap();
        assert_eq!(b.len(), 16 + 16);
        assert_eq!(&b[..4], b"IMGF");
        assert_eq!(&b[4..16], &[2, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[20..24], &0.5f32.to_le_bytes());
        assert_eq!(decode_image(&b).unwrap(), t);
    }

    #[test]
    fn dvf_layout() {
        let mut u = Dvf::zeros(1, 2);
        u.tensor_mut().set(0, 0, 1, 1.5);
        u.tensor_mut().set(1, 0, 1, -2.0);
        let b = encode_dvf(&u).unwrap();
        assert_eq!(b.len(), 12 + 16);
        assert_eq!(&b[4..12], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[20..24], &1.5f32.to_le_bytes());
        assert_eq!(&b[24..28], &(-2.0f32).to_le_bytes());
        assert_eq!(decode_dvf(&b).unwrap(), u);
    }

    #[test]
    fn bad_magic_and_truncation_are_distinct() {
        let t = Tensor::make(Shape::new(1, 2, 3).unwrap(), 0.5);
        let mut b = encode_image(&t).unwrap();
        assert!(matches!(decode_image(&b[..b.len() - 1]), Err(Error::Truncated { .. })));
        b[0] = b'X';
        assert!(matches!(decode_image(&b), Err(Error::BadMagic { .. })));
        let d = encode_dvf(&Dvf::zeros(2, 2)).unwrap();
        assert!(matches!(decode_image(&d), Err(Error::BadMagic { .. })));
        assert!(matches!(decode_dvf(&d[..10]), Err(Error::Truncated { .. })));
        assert!(matches!(decode_dvf(b"DV"), Err(Error::BadMagic { .. })));
        let mut extra = encode_dvf(&Dvf::zeros(2, 2)).unwrap();
        extra.push(0);
        assert!(matches!(decode_dvf(&extra), Err(Error::Malformed(_))));
    }

    fn small_model() -> ModelParams {
        let mut p = ModelParams::init(ModelConfig::default().with_width_divisor(8).with_levels(2), 3).unwrap();
        for (i, s) in p.running_stats_mut().into_iter().enumerate() {
            for (j, v) in s.iter_mut().enumerate() {
                *v = 0.1 * i as f64 + 0.01 * j as f64 + 0.5;
            }
        }
        quantize_to_f32(&mut p);
        p.set_mode(BnMode::Infer);
        p
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = small_model();
        let b = encode_checkpoint(&p).unwrap();
        let q = decode_checkpoint(&b).unwrap();
        assert_eq!(p, q);
        assert_eq!(encode_checkpoint(&q).unwrap(), b);
    }

    #[test]
    fn checkpoint_errors() {
        let b = encode_checkpoint(&small_model()).unwrap();
        let mut bad = b.clone();
        bad[1] = b'3';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::BadMagic { .. })));
        let mut v2 = b.clone();
        v2[4] = 2;
        assert!(matches!(
            decode_checkpoint(&v2),
            Err(Error::VersionMismatch { expected: 1, found: 2 })
        ));
        assert!(matches!(decode_checkpoint(&b[..b.len() - 3]), Err(Error::Truncated { .. })));
    }

    #[test]
    fn pgm_round_trip_on_byte_grid() {
        let t = Tensor::from_fn(3, 5, |y, x| ((y * 5 + x) * 17) as f64 / 255.0);
        let b = encode_pgm(&t);
        assert!(b.starts_with(b"P5\n5 3\n255\n"));
        let back = decode_pgm(&b).unwrap();
        for (a, b) in t.values().iter().zip(back.values()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(decode_pgm(b"P6\n1 1\n255\n\0\0\0"), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn overlay_colors() {
        let w = Tensor::from_vec(Shape::new(1, 1, 2).unwrap(), vec![1.0, 0.0]).unwrap();
        let t = Tensor::from_vec(Shape::new(1, 1, 2).unwrap(), vec![0.0, 1.0]).unwrap();
        let b = encode_overlay(&w, &t).unwrap();
        let header = b"P6\n2 1\n255\n";
        assert_eq!(&b[..header.len()], header);
        assert_eq!(&b[header.len()..], &[255, 0, 255, 0, 255, 0]);
    }

    #[test]
    fn metrics_json_keys() {
        let m = Metrics {
            name: Some("pair_0000".into()),
            dice: 0.9,
            jaccard: 0.9 / 1.1,
            epe_mean: 0.5,
            epe_max: 2.0,
            loss_breakdown: LossBreakdown::new(0.1, 0.0, vec![0.2]),
        };
        let b = encode_metrics(std::slice::from_ref(&m)).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&b).unwrap();
        for k in ["dice", "jaccard", "epe_mean", "epe_max", "loss_breakdown"] {
            assert!(v[0].get(k).is_some(), "{k}");
        }
        assert_eq!(decode_metrics(&b).unwrap(), vec![m]);
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = Tensor::from_fn(2, 2, |y, x| (y + x) as f64 * 0.25);
        let u = Dvf::constant(2, 2, 0.5, -1.0);
        write_pair(dir.path(), &pair_name(1), &a, &a, Some(&u)).unwrap();
        write_pair(dir.path(), &pair_name(0), &a, &a, None).unwrap();
        let d = read_dataset(dir.path()).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d[0].name, "pair_0000");
        assert_eq!(d[0].dvf, None);
        assert_eq!(d[1].dvf, Some(u));
        assert_eq!(d[1].source, a);
        assert!(read_dataset(&dir.path().join("missing")).is_err());
    }

    proptest! {
        #[test]
        fn image_round_trip((h, w, vals) in (1usize..6, 1usize..6).prop_flat_map(|(h, w)| (Just(h), Just(w), f32_values(h * w)))) {
            let t = Tensor::from_vec(Shape::new(1, h, w).unwrap(), vals).unwrap();
            let b = encode_image(&t).unwrap();
            let back = decode_image(&b).unwrap();
            prop_assert_eq!(&back, &t);
            prop_assert_eq!(encode_image(&back).unwrap(), b);
        }

        #[test]
        fn dvf_round_trip((h, w, vals) in (1usize..6, 1usize..6).prop_flat_map(|(h, w)| (Just(h), Just(w), f32_values(2 * h * w)))) {
            let u = Dvf::new(Tensor::from_vec(Shape::new(2, h, w).unwrap(), vals).unwrap()).unwrap();
            let b = encode_dvf(&u).unwrap();
            let back = decode_dvf(&b).unwrap();
            prop_assert_eq!(&back, &u);
            prop_assert_eq!(encode_dvf(&back).unwrap(), b);
        }
    }
}
