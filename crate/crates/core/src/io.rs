//! File formats: CNNW v1 networks, PPM (P6) and RAWF32 images.
//!
//! A CNNW file is a UTF-8 JSON manifest
//! `{"magic":"CNNW","version":1,"input_shape":[h,w,c],"layers":[...]}`.
//! Weight arrays are base64 strings of little-endian `f32`s in row-major
//! order, convolution kernels laid out `(H, W, Cin, Cout)` and dense kernels
//! `(In, Out)`. Weights are widened to `f64` on load.
//!
//! RAWF32 is a 16-byte header (`"RWF1"`, then `u32` H, W, C little-endian)
//! followed by `H*W*C` little-endian `f32` values.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Conv2d, Dense, LayerSpec};
use crate::network::NetworkSpec;
use crate::tensor::Tensor;

pub const CNNW_MAGIC: &str = "CNNW";
pub const CNNW_VERSION: u32 = 1;
pub const RAWF32_MAGIC: &[u8; 4] = b"RWF1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    magic: String,
    version: u32,
    input_shape: Vec<usize>,
    layers: Vec<LayerRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum LayerRecord {
    Conv2d {
        kernel_shape: Vec<usize>,
        kernel: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
        stride: usize,
        padding: usize,
    },
    Relu,
    Softplus {
        smoothing: f64,
    },
    Maxpool2d {
        window: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Dense {
        kernel_shape: Vec<usize>,
        kernel: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
    },
}

fn offset_of(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    line_start + column.saturating_sub(1)
}

fn decode_blob(text: &str, blob: &str, shape: &[usize], what: &str) -> Result<Tensor> {
    let offset = text.find(blob).unwrap_or(0);
    let bytes = B64.decode(blob).map_err(|e| Error::Parse {
        offset,
        message: format!("{what}: invalid base64 ({e})"),
    })?;
    let expected: usize = shape.iter().product::<usize>() * 4;
    if bytes.len() != expected || shape.is_empty() || shape.contains(&0) {
        return Err(Error::Parse {
            offset,
            message: format!(
                "{what}: shape {shape:?} needs {expected} bytes, blob holds {}",
                bytes.len()
            ),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(shape.to_vec(), data)
}

fn encode_blob(t: &Tensor) -> String {
    let bytes: Vec<u8> = t
        .data()
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    B64.encode(bytes)
}

/// Parses a CNNW v1 manifest without requiring the CAM tail.
pub fn parse_network(text: &str) -> Result<NetworkSpec> {
    let manifest: Manifest = serde_json::from_str(text).map_err(|e| Error::Parse {
        offset: offset_of(text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    if manifest.magic != CNNW_MAGIC {
        return Err(Error::Parse {
            offset: text.find("magic").unwrap_or(0),
            message: format!("bad magic {:?}", manifest.magic),
        });
    }
    if manifest.version != CNNW_VERSION {
        return Err(Error::Parse {
            offset: text.find("version").unwrap_or(0),
            message: format!("unsupported version {}", manifest.version),
        });
    }
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (i, rec) in manifest.layers.iter().enumerate() {
        let layer = match rec {
            LayerRecord::Conv2d {
                kernel_shape,
                kernel,
                bias,
                stride,
                padding,
            } => {
                if kernel_shape.len() != 4 {
                    return Err(Error::InvalidLayer {
                        layer: i,
                        message: format!("conv kernel_shape must have 4 entries, got {kernel_shape:?}"),
                    });
                }
                let kernel = decode_blob(text, kernel, kernel_shape, &format!("layer {i} kernel"))?;
                let bias = bias
                    .as_ref()
                    .map(|b| decode_blob(text, b, &kernel_shape[3..], &format!("layer {i} bias")))
                    .transpose()?;
                LayerSpec::Conv2d(Conv2d {
                    kernel,
                    bias,
                    stride: *stride,
                    padding: *padding,
                })
            }
            LayerRecord::Dense {
                kernel_shape,
                kernel,
                bias,
            } => {
                if kernel_shape.len() != 2 {
                    return Err(Error::InvalidLayer {
                        layer: i,
                        message: format!("dense kernel_shape must have 2 entries, got {kernel_shape:?}"),
                    });
                }
                let kernel = decode_blob(text, kernel, kernel_shape, &format!("layer {i} kernel"))?;
                let bias = bias
                    .as_ref()
                    .map(|b| decode_blob(text, b, &kernel_shape[1..], &format!("layer {i} bias")))
                    .transpose()?;
                LayerSpec::Dense(Dense { kernel, bias })
            }
            LayerRecord::Relu => LayerSpec::Relu,
            LayerRecord::Softplus { smoothing } => LayerSpec::Softplus {
                smoothing: *smoothing,
            },
            LayerRecord::Maxpool2d { window, stride } => LayerSpec::MaxPool2d {
                window: *window,
                stride: *stride,
            },
            LayerRecord::GlobalAvgPool => LayerSpec::GlobalAvgPool,
        };
        layers.push(layer);
    }
    NetworkSpec::new(manifest.input_shape, layers)
}

/// Loads a CNNW v1 file and checks it is CAM-compatible.
pub fn load_network(path: impl AsRef<Path>) -> Result<NetworkSpec> {
    let bytes = fs::read(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::Parse {
        offset: e.valid_up_to(),
        message: "file is not UTF-8".into(),
    })?;
    let net = parse_network(text)?;
    net.cam_layout()?;
    Ok(net)
}

/// Serializes to CNNW v1. Weights are narrowed to `f32`.
pub fn network_to_cnnw(net: &NetworkSpec) -> String {
    let layers = net
        .layers()
        .iter()
        .map(|l| match l {
            LayerSpec::Conv2d(c) => LayerRecord::Conv2d {
                kernel_shape: c.kernel.shape().to_vec(),
                kernel: encode_blob(&c.kernel),
                bias: c.bias.as_ref().map(encode_blob),
                stride: c.stride,
                padding: c.padding,
            },
            LayerSpec::Dense(d) => LayerRecord::Dense {
                kernel_shape: d.kernel.shape().to_vec(),
                kernel: encode_blob(&d.kernel),
                bias: d.bias.as_ref().map(encode_blob),
            },
            LayerSpec::Relu => LayerRecord::Relu,
            LayerSpec::Softplus { smoothing } => LayerRecord::Softplus {
                smoothing: *smoothing,
            },
            LayerSpec::MaxPool2d { window, stride } => LayerRecord::Maxpool2d {
                window: *window,
                stride: *stride,
            },
            LayerSpec::GlobalAvgPool => LayerRecord::GlobalAvgPool,
        })
        .collect();
    let manifest = Manifest {
        magic: CNNW_MAGIC.into(),
        version: CNNW_VERSION,
        input_shape: net.input_shape().to_vec(),
        layers,
    };
    serde_json::to_string_pretty(&manifest).expect("manifest serializes")
}

pub fn save_network(net: &NetworkSpec, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, network_to_cnnw(net))?;
    Ok(())
}

/// Decodes PPM (P6, maxval 255) or RAWF32 bytes into an `[h, w, c]` tensor in `[0, 1]`.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else if bytes.starts_with(RAWF32_MAGIC) {
        decode_rawf32(bytes)
    } else {
        let head = &bytes[..bytes.len().min(4)];
        Err(Error::Image(format!("unsupported magic {head:?}")))
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_image(&fs::read(path)?)
}

fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Image(format!("malformed PPM header at byte {start}")))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Image(format!("only 8-bit PPM (maxval 255) is supported, got {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(Error::Image("PPM dimensions must be positive".into()));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Image("PPM header must end in whitespace".into()));
    }
    let body = &bytes[pos + 1..];
    let expected = w * h * 3;
    if body.len() != expected {
        return Err(Error::Image(format!(
            "PPM header says {w}x{h} ({expected} bytes) but found {} bytes of pixel data",
            body.len()
        )));
    }
    let data = body.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![h, w, 3], data)
}

fn decode_rawf32(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 16 {
        return Err(Error::Image("RAWF32 header truncated".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (h, w, c) = (word(4), word(8), word(12));
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::Image("RAWF32 dimensions must be positive".into()));
    }
    let body = &bytes[16..];
    let expected = h * w * c * 4;
    if body.len() != expected {
        return Err(Error::Image(format!(
            "RAWF32 header says {h}x{w}x{c} ({expected} bytes) but found {} bytes",
            body.len()
        )));
    }
    let mut data = Vec::with_capacity(h * w * c);
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Image(format!("RAWF32 value {v} at index {i} is outside [0, 1]")));
        }
        data.push(v as f64);
    }
    Tensor::new(vec![h, w, c], data)
}

/// RAWF32 bytes for any rank-2 or rank-3 tensor; values are written verbatim.
pub fn encode_rawf32(t: &Tensor) -> Result<Vec<u8>> {
    let (h, w, c) = match t.shape() {
        &[h, w] => (h, w, 1),
        &[h, w, c] => (h, w, c),
        other => return Err(Error::Image(format!("cannot write shape {other:?} as RAWF32"))),
    };
    let mut out = Vec::with_capacity(16 + t.len() * 4);
    out.extend_from_slice(RAWF32_MAGIC);
    for d in [h, w, c] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn save_rawf32(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_rawf32(t)?)?;
    Ok(())
}

/// P6 bytes for an `[h, w, 3]` (or `[h, w, 1]`, replicated to grey) tensor in `[0, 1]`.
pub fn encode_ppm(t: &Tensor) -> Result<Vec<u8>> {
    let (h, w, c) = match t.shape() {
        &[h, w, c] if c == 3 || c == 1 => (h, w, c),
        &[h, w] => (h, w, 1),
        other => return Err(Error::Image(format!("cannot write shape {other:?} as PPM"))),
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    for px in t.data().chunks_exact(c) {
        if c == 3 {
            out.extend(px.iter().map(|&v| byte(v)));
        } else {
            out.extend([byte(px[0]); 3]);
        }
    }
    Ok(out)
}

pub fn save_ppm(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_ppm(t)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_single_pixel() {
        let bytes = b"P6\n1 1\n255\n\xff\x00\x80";
        let t = decode_image(bytes).unwrap();
        assert_eq!(t.shape(), &[1, 1, 3]);
        assert_eq!(t.data(), &[1.0, 0.0, 128.0 / 255.0]);
    }

    #[test]
    fn ppm_with_comment_and_wrong_size() {
        let ok = b"P6 # made by hand\n2 1 255\n\x00\x00\x00\x01\x01\x01";
        assert_eq!(decode_image(ok).unwrap().shape(), &[1, 2, 3]);
        let short = b"P6\n2 2\n255\n\x00\x00\x00";
        assert!(matches!(decode_image(short), Err(Error::Image(_))));
    }

    #[test]
    fn rawf32_rejects_out_of_range() {
        let t = Tensor::new(vec![1, 2, 1], vec![0.5, 1.5]).unwrap();
        let bytes = encode_rawf32(&t).unwrap();
        let err = decode_image(&bytes).unwrap_err();
        assert!(err.to_string().contains("outside [0, 1]"), "{err}");
    }

    #[test]
    fn rawf32_round_trip_and_truncation() {
        let t = Tensor::new(vec![2, 1, 2], vec![0.0, 0.25, 0.5, 1.0]).unwrap();
        let bytes = encode_rawf32(&t).unwrap();
        assert_eq!(&bytes[..4], b"RWF1");
        assert_eq!(decode_image(&bytes).unwrap(), t);
        assert!(decode_image(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn unknown_magic() {
        assert!(decode_image(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(decode_image(b"GIF89a").is_err());
    }

    #[test]
    fn json_syntax_error_reports_offset() {
        let text = "{\"magic\":\"CNNW\",\n \"version\": 1,, }";
        match parse_network(text) {
            Err(Error::Parse { offset, .. }) => assert!(offset >= 17 && offset <= text.len(), "{offset}"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
