//! Pattern-map export as binary PGM images.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::autodiff::Tape;
use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::graft::GraftMode;
use crate::model::Patternformer;
use crate::nn::{Ctx, Mode, ParamStore};
use crate::tensor::NdArray;

pub const DEFAULT_BLEND: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct ExportOptions {
    /// Nearest-neighbour upsampling factor applied to each H' x W' map.
    pub upsample: usize,
    /// Also write `overlay_<idx>.pgm`, the map blended over the grey input.
    pub overlay: bool,
    pub blend: f64,
}

impl Default for ExportOptions {
    fn default() -> Self {
        ExportOptions {
            upsample: 1,
            overlay: false,
            blend: DEFAULT_BLEND,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PatternMapDump {
    pub files: Vec<PathBuf>,
    pub manifest: PathBuf,
}

/// P5 bytes for a `w` x `h` grey image.
pub fn encode_pgm(w: usize, h: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Per-map min-max scaling to 0..=255; a constant map becomes 128 everywhere.
pub fn to_grey(map: &[f32]) -> Vec<u8> {
    let (lo, hi) = map
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return vec![128; map.len()];
    }
    map.iter()
        .map(|&v| (((v - lo) / (hi - lo)) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Decodes binary P6 (RGB) or P5 (grey, replicated) with maxval 255 into a
/// (3, H, W) image with values in [0, 1].
pub fn decode_pnm(bytes: &[u8]) -> Result<NdArray<f32>> {
    let bad = |why: &str| Error::config(format!("not a binary PGM/PPM image: {why}"));
    let mut fields = Vec::with_capacity(4);
    let mut at = 0;
    while fields.len() < 4 {
        while at < bytes.len() && bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if bytes.get(at) == Some(&b'#') {
            while at < bytes.len() && bytes[at] != b'\n' {
                at += 1;
            }
            continue;
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if start == at {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..at]).map_err(|_| bad("header is not ASCII"))?);
    }
    at += 1;
    let channels = match fields[0] {
        "P6" => 3,
        "P5" => 1,
        other => return Err(bad(&format!("magic {other}"))),
    };
    let dim = |s: &str| s.parse::<usize>().map_err(|_| bad("bad dimension"));
    let (w, h) = (dim(fields[1])?, dim(fields[2])?);
    if fields[3] != "255" {
        return Err(bad("only maxval 255 is supported"));
    }
    let body = bytes.get(at..).filter(|b| b.len() == w * h * channels).ok_or_else(|| bad("pixel data size"))?;
    Ok(NdArray::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        body[p * channels + c.min(channels - 1)] as f32 / 255.0
    }))
}

fn upsample(pixels: &[u8], w: usize, h: usize, k: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(w * h * k * k);
    for y in 0..h * k {
        for x in 0..w * k {
            out.push(pixels[(y / k) * w + x / k]);
        }
    }
    out
}

/// Writes one PGM per graft conv output channel for `image` (3, H, W), already
/// normalized the way the model was trained. Pattern mode gives one map per
/// token; flexible-patch mode gives one per embedding channel; transpose-patch
/// mode has no channel-as-token maps and is rejected.
pub fn export_pattern_maps(
    model: &Patternformer,
    store: &mut ParamStore<f32>,
    image: &NdArray<f32>,
    out_dir: &Path,
    opts: &ExportOptions,
) -> Result<PatternMapDump> {
    if model.config.graft == GraftMode::TransposePatch {
        return Err(Error::UnsupportedMode {
            op: "export_pattern_maps",
            mode: GraftMode::TransposePatch.to_string(),
        });
    }
    if opts.upsample == 0 || !(0.0..=1.0).contains(&opts.blend) {
        return Err(Error::config("upsample must be >= 1 and blend within [0, 1]"));
    }
    let s = image.shape().to_vec();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("export_pattern_maps", format!("expects (3, H, W), got {s:?}")));
    }
    let maps = {
        let mut ctx = Ctx::new(Tape::no_grad(), store, Mode::Eval);
        let x = ctx.tape().constant(image.reshape(&[1, s[0], s[1], s[2]])?);
        model.pattern_maps(&mut ctx, &x)?.value().clone()
    };
    let (c, h, w) = (maps.shape()[1], maps.shape()[2], maps.shape()[3]);
    let (uh, uw) = (h * opts.upsample, w * opts.upsample);
    let grey_input = opts.overlay.then(|| input_grey(image, uh, uw));
    std::fs::create_dir_all(out_dir)?;
    let mut files = Vec::with_capacity(c);
    let mut manifest = format!(
        "# pattern maps\nmodel = {}\ngraft = {}\nmaps = {c}\nmap_size = {h}x{w}\nupsample = {}\nnormalization = per-map min-max\nblend = {}\n",
        model.config.name, model.config.graft, opts.upsample, opts.blend
    );
    for (idx, map) in maps.data().chunks(h * w).enumerate() {
        let grey = upsample(&to_grey(map), w, h, opts.upsample);
        let path = out_dir.join(format!("pattern_{idx}.pgm"));
        write_atomic(&path, &encode_pgm(uw, uh, &grey))?;
        let (lo, hi) = map
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let _ = writeln!(manifest, "{idx} pattern_{idx}.pgm min={lo:e} max={hi:e}");
        if let Some(base) = &grey_input {
            let blended: Vec<u8> = grey
                .iter()
                .zip(base)
                .map(|(&m, &b)| (opts.blend * m as f64 + (1.0 - opts.blend) * b as f64).round() as u8)
                .collect();
            write_atomic(&out_dir.join(format!("overlay_{idx}.pgm")), &encode_pgm(uw, uh, &blended))?;
        }
        files.push(path);
    }
    let manifest_path = out_dir.join("manifest.txt");
    write_atomic(&manifest_path, manifest.as_bytes())?;
    Ok(PatternMapDump {
        files,
        manifest: manifest_path,
    })
}

/// Channel-mean of the input, min-max scaled and nearest-resampled to `h` x `w`.
fn input_grey(image: &NdArray<f32>, h: usize, w: usize) -> Vec<u8> {
    let (ih, iw) = (image.shape()[1], image.shape()[2]);
    let plane = ih * iw;
    let mean: Vec<f32> = (0..plane)
        .map(|i| (image.data()[i] + image.data()[plane + i] + image.data()[2 * plane + i]) / 3.0)
        .collect();
    let grey = to_grey(&mean);
    (0..h * w)
        .map(|i| grey[(i / w) * ih / h * iw + (i % w) * iw / w])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn pgm_header_and_constant_maps() {
        let bytes = encode_pgm(2, 1, &[0, 255]);
        assert_eq!(bytes, b"P5\n2 1\n255\n\x00\xff");
        assert_eq!(to_grey(&[3.0; 4]), vec![128; 4]);
        assert_eq!(to_grey(&[1.0, 3.0, 2.0]), vec![0, 255, 128]);
    }

    #[test]
    fn pnm_decoding() {
        let img = decode_pnm(b"P6\n# c\n2 1\n255\n\x00\x80\xff\xff\x00\x00").unwrap();
        assert_eq!(img.shape(), &[3, 1, 2]);
        assert_eq!(img.data(), &[0.0, 1.0, 128.0 / 255.0, 0.0, 1.0, 0.0]);
        let grey = decode_pnm(&encode_pgm(2, 1, &[0, 255])).unwrap();
        assert_eq!(grey.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(decode_pnm(b"P6\n2 1\n255\n\x00").is_err());
    }

    #[test]
    fn tiny_model_exports_one_file_per_token() {
        let cfg = ModelConfig::preset("tiny").unwrap();
        let (model, mut store) = Patternformer::assemble::<f32>(&cfg, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let image = NdArray::zeros(&[3, 64, 64]);
        let opts = ExportOptions {
            upsample: 32,
            overlay: true,
            ..Default::default()
        };
        let dump = export_pattern_maps(&model, &mut store, &image, dir.path(), &opts).unwrap();
        assert_eq!(dump.files.len(), 8);
        for f in &dump.files {
            let bytes = std::fs::read(f).unwrap();
            let header = b"P5\n64 64\n255\n";
            assert_eq!(&bytes[..header.len()], header);
            assert!(bytes[header.len()..].iter().all(|&b| b == 128));
        }
        let manifest = std::fs::read_to_string(&dump.manifest).unwrap();
        assert!(manifest.contains("blend = 0.5"));
    }

    #[test]
    fn transpose_patch_is_unsupported() {
        let mut cfg = ModelConfig::preset("tiny").unwrap();
        cfg.graft = GraftMode::TransposePatch;
        cfg.tokens = 4;
        let (model, mut store) = Patternformer::assemble::<f32>(&cfg, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let err = export_pattern_maps(&model, &mut store, &NdArray::zeros(&[3, 64, 64]), dir.path(), &Default::default());
        assert!(matches!(err, Err(Error::UnsupportedMode { .. })));
    }
}
