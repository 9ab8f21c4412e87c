//! Checkpoint directories.
//!
//! Layout:
//! - `tensors.bin`: every tensor's values back to back, little-endian f64.
//! - `manifest.txt`: a header line, `step <n>`, then `name rows cols offset`
//!   per tensor, where `offset` counts values from the start of the file.
//! - `config.toml`: the run configuration the parameters were built for.
//!
//! Adam moments are stored under the `adam_m.` and `adam_v.` prefixes.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{ModtError, Result};
use crate::model::ModelParams;
use crate::numerics::Tensor;
use crate::params::ParamSet;
use crate::train::AdamState;

const HEADER: &str = "modt-checkpoint 1";
pub const TENSORS_FILE: &str = "tensors.bin";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ModelParams,
    pub adam: AdamState,
}

impl Checkpoint {
    /// Fresh parameters drawn from the config seed.
    pub fn initial(config: RunConfig) -> Self {
        let params = ModelParams::init(&mut ChaCha8Rng::seed_from_u64(config.seed), &config.model());
        let adam = AdamState::new(&params);
        Self { config, params, adam }
    }

    fn sections(&self) -> [(&'static str, &ModelParams); 3] {
        [("", &self.params), ("adam_m.", &self.adam.m), ("adam_v.", &self.adam.v)]
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| ModtError::io(format!("creating {}", dir.display()), e))?;
        let mut bytes = Vec::new();
        let mut manifest = format!("{HEADER}\nstep {}\n", self.adam.step);
        let mut offset = 0usize;
        for (prefix, group) in self.sections() {
            group.visit(&mut |name, t| {
                let _ = writeln!(manifest, "{prefix}{name} {} {} {offset}", t.rows(), t.cols());
                offset += t.len();
                for v in t.data() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            });
        }
        let write = |file: &str, data: &[u8]| {
            let p = dir.join(file);
            fs::write(&p, data).map_err(|e| ModtError::io(format!("writing {}", p.display()), e))
        };
        write(TENSORS_FILE, &bytes)?;
        write(MANIFEST_FILE, manifest.as_bytes())?;
        write(CONFIG_FILE, self.config.to_toml()?.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(ModtError::Runtime(format!("checkpoint directory {} not found", dir.display())));
        }
        let config = RunConfig::load(&dir.join(CONFIG_FILE))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        let manifest =
            fs::read_to_string(&manifest_path).map_err(|e| ModtError::io(format!("reading {}", manifest_path.display()), e))?;
        let bin_path = dir.join(TENSORS_FILE);
        let bytes = fs::read(&bin_path).map_err(|e| ModtError::io(format!("reading {}", bin_path.display()), e))?;
        if bytes.len() % 8 != 0 {
            return Err(ModtError::ScanFormat {
                path: bin_path,
                offset: bytes.len(),
                message: "length is not a multiple of 8".into(),
            });
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();

        let line_err = |line: usize, message: String| ModtError::TextFormat {
            path: manifest_path.clone(),
            line,
            message,
        };
        let mut lines = manifest.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == HEADER => {}
            _ => return Err(line_err(1, format!("expected header {HEADER:?}"))),
        }
        let step = match lines.next().map(|(i, l)| (i, l.split_whitespace().collect::<Vec<_>>())) {
            Some((_, f)) if f.len() == 2 && f[0] == "step" => f[1].parse().map_err(|_| line_err(2, "bad step".into()))?,
            _ => return Err(line_err(2, "expected `step <n>`".into())),
        };
        let mut table: HashMap<String, (usize, (usize, usize), usize)> = HashMap::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let parse = |s: &str| s.parse::<usize>().map_err(|_| line_err(i + 1, format!("bad integer {s:?}")));
            if f.len() != 4 {
                return Err(line_err(i + 1, "expected `name rows cols offset`".into()));
            }
            let (rows, cols, off) = (parse(f[1])?, parse(f[2])?, parse(f[3])?);
            if off + rows * cols > values.len() {
                return Err(line_err(i + 1, format!("tensor {} runs past the end of {TENSORS_FILE}", f[0])));
            }
            if table.insert(f[0].to_string(), (i + 1, (rows, cols), off)).is_some() {
                return Err(line_err(i + 1, format!("duplicate tensor {}", f[0])));
            }
        }

        let mut ck = Checkpoint::initial(config);
        ck.adam.step = step;
        let mut missing = None;
        let mut mismatch = None;
        let fill = |prefix: &str, group: &mut ModelParams, missing: &mut Option<String>, mismatch: &mut Option<ModtError>| {
            group.visit_mut(&mut |name, t| {
                let key = format!("{prefix}{name}");
                match table.get(&key) {
                    None => {
                        missing.get_or_insert(key);
                    }
                    Some(&(line, shape, _)) if shape != t.shape() => {
                        mismatch.get_or_insert(line_err(line, format!("{key} has shape {shape:?}, config expects {:?}", t.shape())));
                    }
                    Some(&(_, (r, c), off)) => {
                        *t = Tensor::new(r, c, values[off..off + r * c].to_vec()).expect("shape checked");
                    }
                }
            });
        };
        fill("", &mut ck.params, &mut missing, &mut mismatch);
        fill("adam_m.", &mut ck.adam.m, &mut missing, &mut mismatch);
        fill("adam_v.", &mut ck.adam.v, &mut missing, &mut mismatch);
        if let Some(e) = mismatch {
            return Err(e);
        }
        if let Some(k) = missing {
            return Err(line_err(0, format!("tensor {k} missing from manifest")));
        }
        let expected = 3 * ck.params.names().len();
        if table.len() != expected {
            return Err(line_err(0, format!("manifest lists {} tensors, expected {expected}", table.len())));
        }
        Ok(ck)
    }
}
