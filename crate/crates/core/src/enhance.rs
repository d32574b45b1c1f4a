//! Selective enhancement: frames flagged by the degradation judge are routed to a
//! classical enhancer or to an external sidecar over a small framed protocol.
//!
//! Wire format (big-endian length): `"RGE1" | u32 len | PNG RGB8` for requests and
//! successful responses, `"RGEE" | u32 len | UTF-8 message` for errors.

use std::io::{Cursor, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::degradation::{judge, DegradationReport};
use crate::error::{Error, Result};
use crate::image::{median3x3_rgb, RgbImage};
use crate::types::Frame;

pub const MAGIC_OK: &[u8; 4] = b"RGE1";
pub const MAGIC_ERR: &[u8; 4] = b"RGEE";
/// Upper bound on a payload accepted from the wire.
pub const MAX_PAYLOAD: u32 = 64 << 20;
/// Mean gray level the classical enhancer lifts toward: mid-gray exposure.
pub const DEFAULT_TARGET_MU: f64 = 128.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnhancerMode {
    #[default]
    Off,
    Classical,
    Sidecar,
}

impl std::str::FromStr for EnhancerMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(Self::Off),
            "classical" => Ok(Self::Classical),
            "sidecar" => Ok(Self::Sidecar),
            _ => Err(Error::Config(format!("unknown enhancer mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnhancerBinding {
    pub mode: EnhancerMode,
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
    pub fallback_on_error: bool,
    pub target_mu: f64,
}

impl Default for EnhancerBinding {
    fn default() -> Self {
        Self {
            mode: EnhancerMode::Off,
            endpoint: None,
            timeout_ms: 2000,
            fallback_on_error: true,
            target_mu: DEFAULT_TARGET_MU,
        }
    }
}

impl EnhancerBinding {
    pub fn classical() -> Self {
        Self {
            mode: EnhancerMode::Classical,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.mode, &self.endpoint) {
            (EnhancerMode::Sidecar, None) => Err(Error::Config("sidecar mode requires an endpoint".into())),
            (EnhancerMode::Off | EnhancerMode::Classical, Some(_)) => {
                Err(Error::Config("endpoint is only valid in sidecar mode".into()))
            }
            _ if self.timeout_ms == 0 => Err(Error::Config("timeout_ms must be > 0".into())),
            _ if !(self.target_mu > 0.0 && self.target_mu < 255.0) => {
                Err(Error::Config(format!("target_mu {} outside (0, 255)", self.target_mu)))
            }
            _ => Ok(()),
        }
    }
}

/// Which path produced the frame handed to tracking and mapping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Passthrough,
    Classical { latency_ms: f64 },
    Sidecar { endpoint: String, latency_ms: f64 },
    /// Sidecar failed; the classical enhancer was used instead.
    Fallback { error: String, latency_ms: f64 },
    /// Sidecar failed and fallback is disabled; the frame is unmodified.
    Failed { error: String },
}

impl Provenance {
    pub fn enhanced(&self) -> bool {
        !matches!(self, Provenance::Passthrough | Provenance::Failed { .. })
    }
}

/// 3×3 median denoise, then a gamma lift that maps the mean luminance toward
/// `target_mu` (8-bit scale). The exponent is clamped to `[0.3, 1]` so bright images
/// are never darkened.
pub fn classical_enhance(img: &RgbImage, target_mu: f64) -> RgbImage {
    let den = median3x3_rgb(&img.clamped());
    let mu = judge(&den).mu_l;
    let g = lift_exponent(mu, target_mu);
    if g == 1.0 {
        return den;
    }
    den.map(|p| p.map(|v| v.powf(g).clamp(0.0, 1.0)))
}

pub fn lift_exponent(mu_l: f64, target_mu: f64) -> f64 {
    let g = (target_mu / 255.0).ln() / (mu_l.max(1.0) / 255.0).ln();
    if g.is_finite() {
        g.clamp(0.3, 1.0)
    } else {
        1.0
    }
}

/// Gate a frame through the configured enhancer.
pub fn maybe_enhance(frame: &Frame, report: &DegradationReport, binding: &EnhancerBinding) -> (Frame, Provenance) {
    if !report.trigger || binding.mode == EnhancerMode::Off {
        return (frame.clone(), Provenance::Passthrough);
    }
    let start = Instant::now();
    let elapsed = |s: Instant| s.elapsed().as_secs_f64() * 1e3;
    let mut out = frame.clone();
    match binding.mode {
        EnhancerMode::Off => unreachable!(),
        EnhancerMode::Classical => {
            out.rgb = classical_enhance(&frame.rgb, binding.target_mu);
            (out, Provenance::Classical { latency_ms: elapsed(start) })
        }
        EnhancerMode::Sidecar => {
            let endpoint = binding.endpoint.clone().unwrap_or_default();
            let timeout = Duration::from_millis(binding.timeout_ms);
            match SidecarClient::new(&endpoint, timeout).and_then(|c| c.enhance(&frame.rgb)) {
                Ok(rgb) => {
                    out.rgb = rgb;
                    (out, Provenance::Sidecar { endpoint, latency_ms: elapsed(start) })
                }
                Err(e) if binding.fallback_on_error => {
                    log::warn!("sidecar enhancement failed ({e}); using classical fallback");
                    out.rgb = classical_enhance(&frame.rgb, binding.target_mu);
                    (
                        out,
                        Provenance::Fallback {
                            error: e.to_string(),
                            latency_ms: elapsed(start),
                        },
                    )
                }
                Err(e) => {
                    log::warn!("sidecar enhancement failed ({e}); frame passed through");
                    (out, Provenance::Failed { error: e.to_string() })
                }
            }
        }
    }
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.to_rgb8().write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn decode_png(bytes: &[u8]) -> Result<RgbImage> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
    Ok(RgbImage::from_rgb8(&img.to_rgb8()))
}

/// A decoded wire message.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Message {
    Image(Vec<u8>),
    Error(String),
}

pub fn write_message(w: &mut impl Write, msg: &Message) -> Result<()> {
    let (magic, payload): (&[u8; 4], &[u8]) = match msg {
        Message::Image(p) => (MAGIC_OK, p),
        Message::Error(s) => (MAGIC_ERR, s.as_bytes()),
    };
    let len = u32::try_from(payload.len())
        .ok()
        .filter(|l| *l <= MAX_PAYLOAD)
        .ok_or_else(|| Error::Protocol(format!("payload of {} bytes too large", payload.len())))?;
    let io = |e: std::io::Error| Error::Protocol(format!("write failed: {e}"));
    w.write_all(magic).map_err(io)?;
    w.write_all(&len.to_be_bytes()).map_err(io)?;
    w.write_all(payload).map_err(io)?;
    w.flush().map_err(io)
}

pub fn read_message(r: &mut impl Read) -> Result<Message> {
    let io = |e: std::io::Error| Error::Protocol(format!("read failed: {e}"));
    let mut header = [0u8; 8];
    r.read_exact(&mut header).map_err(io)?;
    let len = u32::from_be_bytes(header[4..8].try_into().unwrap());
    if len > MAX_PAYLOAD {
        return Err(Error::Protocol(format!("payload length {len} exceeds limit")));
    }
    let magic: [u8; 4] = header[..4].try_into().unwrap();
    if &magic != MAGIC_OK && &magic != MAGIC_ERR {
        return Err(Error::Protocol(format!("bad magic {magic:?}")));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload).map_err(io)?;
    if &magic == MAGIC_OK {
        Ok(Message::Image(payload))
    } else {
        String::from_utf8(payload)
            .map(Message::Error)
            .map_err(|_| Error::Protocol("error message is not UTF-8".into()))
    }
}

/// Blocking client for one request/response exchange per connection.
#[derive(Clone, Debug)]
pub struct SidecarClient {
    addr: std::net::SocketAddr,
    timeout: Duration,
}

impl SidecarClient {
    pub fn new(endpoint: &str, timeout: Duration) -> Result<Self> {
        let addr = endpoint
            .to_socket_addrs()
            .map_err(|e| Error::Protocol(format!("cannot resolve {endpoint:?}: {e}")))?
            .next()
            .ok_or_else(|| Error::Protocol(format!("no address for {endpoint:?}")))?;
        Ok(Self { addr, timeout })
    }

    pub fn enhance(&self, img: &RgbImage) -> Result<RgbImage> {
        let mut stream = TcpStream::connect_timeout(&self.addr, self.timeout)
            .map_err(|e| Error::Protocol(format!("connect to {}: {e}", self.addr)))?;
        let deadline = Instant::now() + self.timeout;
        let remaining = || {
            deadline
                .checked_duration_since(Instant::now())
                .filter(|d| !d.is_zero())
                .ok_or_else(|| Error::Protocol("sidecar timed out".into()))
        };
        stream.set_write_timeout(Some(remaining()?)).ok();
        write_message(&mut stream, &Message::Image(encode_png(img)?))?;
        stream.set_read_timeout(Some(remaining()?)).ok();
        match read_message(&mut stream)? {
            Message::Error(e) => Err(Error::Protocol(format!("sidecar error: {e}"))),
            Message::Image(bytes) => {
                let out = decode_png(&bytes)?;
                if out.dims() != img.dims() {
                    return Err(Error::Protocol(format!(
                        "sidecar returned {:?}, expected {:?}",
                        out.dims(),
                        img.dims()
                    )));
                }
                Ok(out)
            }
        }
    }
}
