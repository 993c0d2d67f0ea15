//! Single-file checkpoint container.
//!
//! Layout: a UTF-8 header, the line `data`, then every array as
//! little-endian `f64` in header order.
//!
//! ```text
//! crowdformer-checkpoint 1
//! fingerprint <sha256 hex>
//! step <u64>
//! source <dataset id>
//! rng <seed hex> <word position> <stream>
//! config <byte length>
//! <config text, exactly that many bytes>
//! arrays <count>
//! <name> <d0>x<d1>x...
//! data
//! ```
//!
//! Arrays are the model parameters followed by `adam.m/<name>` and
//! `adam.v/<name>` for each of them.

use std::fmt::Write as _;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::CrowdFormer;
use crate::optim::TrainState;
use crate::tensor::Tensor;

pub const FORMAT_MAGIC: &str = "crowdformer-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

const FIRST_MOMENT: &str = "adam.m/";
const SECOND_MOMENT: &str = "adam.v/";

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub run: RunConfig,
    pub source: String,
    pub model: CrowdFormer,
    pub state: TrainState,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(run: RunConfig, source: impl Into<String>, model: CrowdFormer, state: TrainState) -> Result<Self> {
        if !state.matches(&model.params) {
            return Err(bad("optimizer state does not match the model parameters"));
        }
        let source = source.into();
        if source.is_empty() || source.contains(char::is_whitespace) {
            return Err(bad(format!("source id {source:?} must be a single non-empty word")));
        }
        Ok(Self { run, source, model, state })
    }

    pub fn fingerprint(&self) -> String {
        self.run.fingerprint()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let params = &self.model.params;
        let mut header = String::new();
        let config = self.run.to_text();
        let rng = &self.state.rng;
        let _ = writeln!(header, "{FORMAT_MAGIC} {FORMAT_VERSION}");
        let _ = writeln!(header, "fingerprint {}", self.fingerprint());
        let _ = writeln!(header, "step {}", self.state.step);
        let _ = writeln!(header, "source {}", self.source);
        let _ = writeln!(
            header,
            "rng {} {} {}",
            hex::encode(rng.get_seed()),
            rng.get_word_pos(),
            rng.get_stream()
        );
        let _ = writeln!(header, "config {}", config.len());
        header.push_str(&config);
        let _ = writeln!(header, "arrays {}", params.len() * 3);
        for prefix in ["", FIRST_MOMENT, SECOND_MOMENT] {
            for (name, t) in params.iter() {
                let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
                let _ = writeln!(header, "{prefix}{name} {}", dims.join("x"));
            }
        }
        header.push_str("data\n");

        let mut out = header.into_bytes();
        let mut put = |xs: &[f64]| {
            for x in xs {
                out.extend_from_slice(&x.to_le_bytes());
            }
        };
        for (_, t) in params.iter() {
            put(t.data());
        }
        for m in &self.state.first_moments {
            put(m);
        }
        for v in &self.state.second_moments {
            put(v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut reader = Reader { bytes, pos: 0 };
        let magic = reader.line()?;
        if magic != format!("{FORMAT_MAGIC} {FORMAT_VERSION}") {
            return Err(bad(format!("unsupported header {magic:?}")));
        }
        let fingerprint = reader.field("fingerprint")?.to_string();
        let step: u64 = parse_num(reader.field("step")?, "step")?;
        let source = reader.field("source")?.to_string();
        let rng_line = reader.field("rng")?.to_string();
        let config_len: usize = parse_num(reader.field("config")?, "config length")?;
        let config_text = std::str::from_utf8(reader.take(config_len)?).map_err(|_| bad("config is not UTF-8"))?;
        let run = RunConfig::parse(config_text)?;
        if run.fingerprint() != fingerprint {
            return Err(bad("stored fingerprint does not match the embedded config"));
        }
        let count: usize = parse_num(reader.field("arrays")?, "array count")?;
        let mut layout = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let line = reader.line()?;
            let (name, dims) = line.rsplit_once(' ').ok_or_else(|| bad(format!("bad array line {line:?}")))?;
            let shape = dims
                .split('x')
                .map(|d| parse_num::<usize>(d, "dimension"))
                .collect::<Result<Vec<_>>>()?;
            layout.push((name.to_string(), shape));
        }
        if reader.line()? != "data" {
            return Err(bad("missing data marker"));
        }

        let mut model = CrowdFormer::new(&run.model, run.optim.seed)?;
        let n = model.params.len();
        if count != 3 * n {
            return Err(bad(format!("{count} arrays stored, model needs {}", 3 * n)));
        }
        let expected: Vec<(String, Vec<usize>)> = model
            .params
            .iter()
            .map(|(name, t)| (name.to_string(), t.shape().to_vec()))
            .collect();
        let mut moments = (Vec::with_capacity(n), Vec::with_capacity(n));
        for (i, (name, shape)) in layout.into_iter().enumerate() {
            let (want_name, want_shape) = &expected[i % n];
            let prefix = ["", FIRST_MOMENT, SECOND_MOMENT][i / n];
            if name != format!("{prefix}{want_name}") || &shape != want_shape {
                return Err(bad(format!(
                    "array {name} {shape:?} does not match model {prefix}{want_name} {want_shape:?}"
                )));
            }
            let numel: usize = shape.iter().product();
            let values = reader.floats(numel)?;
            match i / n {
                0 => model.params.assign(&name, Tensor::new(shape, values)?)?,
                1 => moments.0.push(values),
                _ => moments.1.push(values),
            }
        }
        if reader.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - reader.pos)));
        }

        let mut state = TrainState::new(&model.params, run.optim.seed);
        state.step = step;
        state.first_moments = moments.0;
        state.second_moments = moments.1;
        state.rng = parse_rng(&rng_line)?;
        Self::new(run, source, model, state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

fn parse_num<T: std::str::FromStr>(text: &str, what: &str) -> Result<T> {
    text.trim().parse().map_err(|_| bad(format!("bad {what} {text:?}")))
}

fn parse_rng(line: &str) -> Result<ChaCha8Rng> {
    let parts: Vec<&str> = line.split(' ').collect();
    let [seed, word_pos, stream] = parts[..] else {
        return Err(bad(format!("bad rng line {line:?}")));
    };
    let seed: [u8; 32] = hex::decode(seed)
        .ok()
        .and_then(|s| s.try_into().ok())
        .ok_or_else(|| bad("bad rng seed"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(parse_num(stream, "rng stream")?);
    rng.set_word_pos(parse_num(word_pos, "rng word position")?);
    Ok(rng)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad("truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let len = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header"))?;
        let line = std::str::from_utf8(&rest[..len]).map_err(|_| bad("header is not UTF-8"))?;
        self.pos += len + 1;
        Ok(line)
    }

    fn field(&mut self, key: &str) -> Result<&'a str> {
        let line = self.line()?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| bad(format!("expected {key}, found {line:?}")))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| bad("array too large"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }
}
