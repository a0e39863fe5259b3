//! Synthetic multi-domain identity data and identity-balanced batching.
//!
//! Every identity owns a latent prototype. A sample renders its prototype
//! plus noise through a fixed random linear map into `(L, d_in)` tokens, then
//! applies its domain's style: a per-channel scale and shift drawn once per
//! domain. Domains therefore differ in exactly the first- and second-order
//! channel statistics that instance normalization acts on.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::rngs::StdRng;
use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_ids: usize,
    pub num_domains: usize,
    pub samples_per_id_per_domain: usize,
    pub latent_dim: usize,
    /// Tokens `L` per sample.
    pub tokens: usize,
    /// Channels `d_in` per token.
    pub channels: usize,
    pub noise_sigma: f64,
    pub style_strength: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_ids: 20,
            num_domains: 3,
            samples_per_id_per_domain: 6,
            latent_dim: 8,
            tokens: 4,
            channels: 8,
            noise_sigma: 0.3,
            style_strength: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.num_ids < 2 {
            return bad(format!("num_ids must be >= 2, got {}", self.num_ids));
        }
        if self.num_domains < 2 {
            return bad(format!(
                "num_domains must be >= 2, got {}",
                self.num_domains
            ));
        }
        if self.samples_per_id_per_domain < 2 {
            return bad(format!(
                "samples_per_id_per_domain must be >= 2, got {}",
                self.samples_per_id_per_domain
            ));
        }
        if self.latent_dim == 0 || self.tokens == 0 || self.channels == 0 {
            return bad("latent_dim, tokens and channels must be positive".into());
        }
        if !(self.noise_sigma >= 0.0) || !(self.style_strength >= 0.0) {
            return bad("noise_sigma and style_strength must be >= 0".into());
        }
        Ok(())
    }

    /// `key = value` lines, in declaration order.
    pub fn header_lines(&self) -> Vec<(String, String)> {
        [
            ("num_ids", self.num_ids.to_string()),
            ("num_domains", self.num_domains.to_string()),
            (
                "samples_per_id_per_domain",
                self.samples_per_id_per_domain.to_string(),
            ),
            ("latent_dim", self.latent_dim.to_string()),
            ("tokens", self.tokens.to_string()),
            ("channels", self.channels.to_string()),
            ("noise_sigma", format!("{:?}", self.noise_sigma)),
            ("style_strength", format!("{:?}", self.style_strength)),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| {
                Error::InvalidArgument(format!("dataset header `{key}`: cannot parse `{v}`"))
            })
        }
        match key {
            "num_ids" => self.num_ids = parse(key, value)?,
            "num_domains" => self.num_domains = parse(key, value)?,
            "samples_per_id_per_domain" => self.samples_per_id_per_domain = parse(key, value)?,
            "latent_dim" => self.latent_dim = parse(key, value)?,
            "tokens" => self.tokens = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "noise_sigma" => self.noise_sigma = parse(key, value)?,
            "style_strength" => self.style_strength = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown dataset header key `{other}`"
                )))
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    /// `(L, d_in)`.
    pub tokens: Tensor,
    pub id: usize,
    pub domain: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    pub samples: Vec<LabeledSample>,
}

/// Sample indices of the three evaluation partitions.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    /// First half (rounded up) of every identity's samples in each source domain.
    pub train: Vec<usize>,
    /// Remaining source-domain samples.
    pub heldin_test: Vec<usize>,
    /// Every sample of the withheld domain.
    pub heldout: Vec<usize>,
}

fn normal(rng: &mut StdRng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn generate_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = StdRng::seed_from_u64(spec.seed);
    let width = spec.tokens * spec.channels;

    let prototypes: Vec<Vec<f64>> = (0..spec.num_ids)
        .map(|_| (0..spec.latent_dim).map(|_| normal(&mut rng)).collect())
        .collect();
    let map_scale = 1.0 / (spec.latent_dim as f64).sqrt();
    let render: Vec<f64> = (0..width * spec.latent_dim)
        .map(|_| normal(&mut rng) * map_scale)
        .collect();
    // per-domain (scale, shift) for every channel
    let styles: Vec<Vec<(f64, f64)>> = (0..spec.num_domains)
        .map(|_| {
            (0..spec.channels)
                .map(|_| {
                    let scale = (0.3 * spec.style_strength * normal(&mut rng)).exp();
                    let shift = spec.style_strength * normal(&mut rng);
                    (scale, shift)
                })
                .collect()
        })
        .collect();

    let mut samples =
        Vec::with_capacity(spec.num_ids * spec.num_domains * spec.samples_per_id_per_domain);
    for (domain, style) in styles.iter().enumerate() {
        for (id, proto) in prototypes.iter().enumerate() {
            for _ in 0..spec.samples_per_id_per_domain {
                let latent: Vec<f64> = proto
                    .iter()
                    .map(|p| p + spec.noise_sigma * normal(&mut rng))
                    .collect();
                let data = (0..width)
                    .map(|i| {
                        let row = &render[i * spec.latent_dim..(i + 1) * spec.latent_dim];
                        let x: f64 = row.iter().zip(&latent).map(|(a, z)| a * z).sum();
                        let (scale, shift) = style[i % spec.channels];
                        x * scale + shift
                    })
                    .collect();
                samples.push(LabeledSample {
                    tokens: Tensor::new(vec![spec.tokens, spec.channels], data)?,
                    id,
                    domain,
                });
            }
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        samples,
    })
}

impl Dataset {
    /// Withholds `heldout_domain` entirely from training.
    pub fn split(&self, heldout_domain: usize) -> Result<Split> {
        if heldout_domain >= self.spec.num_domains {
            return Err(Error::InvalidArgument(format!(
                "heldout domain {heldout_domain} out of range for {} domains",
                self.spec.num_domains
            )));
        }
        let train_per_group = self.spec.samples_per_id_per_domain.div_ceil(2);
        let mut seen = std::collections::HashMap::new();
        let mut split = Split {
            train: Vec::new(),
            heldin_test: Vec::new(),
            heldout: Vec::new(),
        };
        for (i, s) in self.samples.iter().enumerate() {
            if s.domain == heldout_domain {
                split.heldout.push(i);
                continue;
            }
            let count = seen.entry((s.id, s.domain)).or_insert(0usize);
            if *count < train_per_group {
                split.train.push(i);
            } else {
                split.heldin_test.push(i);
            }
            *count += 1;
        }
        Ok(split)
    }

    /// Stacks the tokens of `indices` into `(n, L, d_in)`.
    pub fn stack(&self, indices: &[usize]) -> Result<Tensor> {
        let (l, c) = (self.spec.tokens, self.spec.channels);
        let mut data = Vec::with_capacity(indices.len() * l * c);
        for &i in indices {
            data.extend_from_slice(self.samples[i].tokens.data());
        }
        Tensor::new(vec![indices.len(), l, c], data)
    }
}

/// A mini-batch of `P` identities with `K` samples each.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub tokens: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Draws identity-balanced batches from a pool of sample indices.
#[derive(Clone, Debug)]
pub struct PkSampler {
    by_id: Vec<(usize, Vec<usize>)>,
}

impl PkSampler {
    pub fn new(dataset: &Dataset, pool: &[usize]) -> Self {
        let mut map: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for &i in pool {
            map.entry(dataset.samples[i].id).or_default().push(i);
        }
        Self {
            by_id: map.into_iter().collect(),
        }
    }

    /// Sample indices of one `P × K` batch, grouped by identity.
    pub fn sample(&self, rng: &mut impl Rng, p: usize, k: usize) -> Result<Vec<usize>> {
        if p < 2 || k < 2 {
            return Err(Error::InvalidArgument(format!(
                "PK sampling needs P >= 2 and K >= 2, got P = {p}, K = {k}"
            )));
        }
        let eligible: Vec<&(usize, Vec<usize>)> =
            self.by_id.iter().filter(|(_, v)| v.len() >= k).collect();
        if eligible.len() < p {
            return Err(Error::InvalidArgument(format!(
                "PK sampling needs {p} identities with >= {k} samples, only {} available",
                eligible.len()
            )));
        }
        let mut out = Vec::with_capacity(p * k);
        for which in index::sample(rng, eligible.len(), p) {
            let pool = &eligible[which].1;
            out.extend(pool.choose_multiple(rng, k).copied());
        }
        Ok(out)
    }
}

/// One `P × K` batch from `pool`.
pub fn pk_batch_sample(
    dataset: &Dataset,
    pool: &[usize],
    p: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<Batch> {
    let indices = PkSampler::new(dataset, pool).sample(rng, p, k)?;
    Ok(Batch {
        tokens: dataset.stack(&indices)?,
        labels: indices.iter().map(|&i| dataset.samples[i].id).collect(),
        indices,
    })
}

const DATASET_MAGIC: &str = "ADPDATA1";

/// Writes the dataset: a text header (magic line, `key = value` spec lines,
/// record count, `end_header`), then per record two little-endian `u64`
/// labels `(id, domain)` followed by `L·d_in` little-endian `f64` values.
pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    let mut header = format!("{DATASET_MAGIC}\n");
    for (k, v) in dataset.spec.header_lines() {
        header.push_str(&format!("{k} = {v}\n"));
    }
    header.push_str(&format!(
        "records = {}\nend_header\n",
        dataset.samples.len()
    ));
    out.write_all(header.as_bytes()).map_err(io)?;
    for s in &dataset.samples {
        out.write_all(&(s.id as u64).to_le_bytes()).map_err(io)?;
        out.write_all(&(s.domain as u64).to_le_bytes())
            .map_err(io)?;
        for v in s.tokens.data() {
            out.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let io = |e| Error::io(path, e);
    let mut input = BufReader::new(std::fs::File::open(path).map_err(io)?);
    let mut line = String::new();
    let mut next_line = |input: &mut BufReader<std::fs::File>| -> Result<String> {
        line.clear();
        input.read_line(&mut line).map_err(io)?;
        Ok(line.trim_end_matches('\n').to_string())
    };
    if next_line(&mut input)? != DATASET_MAGIC {
        return Err(Error::InvalidArgument(format!(
            "{}: not a dataset dump",
            path.display()
        )));
    }
    let mut spec = SyntheticSpec::default();
    let mut records = None;
    loop {
        let l = next_line(&mut input)?;
        if l == "end_header" {
            break;
        }
        let (k, v) = l
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| {
                Error::InvalidArgument(format!("malformed dataset header line `{l}`"))
            })?;
        if k == "records" {
            records = v.parse::<usize>().ok();
        } else {
            spec.set(k, v)?;
        }
    }
    let records =
        records.ok_or_else(|| Error::InvalidArgument("dataset header lacks `records`".into()))?;
    let width = spec.tokens * spec.channels;
    let mut samples = Vec::with_capacity(records);
    let mut word = [0u8; 8];
    for _ in 0..records {
        let mut read_word = |input: &mut BufReader<std::fs::File>| -> Result<[u8; 8]> {
            input.read_exact(&mut word).map_err(io)?;
            Ok(word)
        };
        let id = u64::from_le_bytes(read_word(&mut input)?) as usize;
        let domain = u64::from_le_bytes(read_word(&mut input)?) as usize;
        let data = (0..width)
            .map(|_| read_word(&mut input).map(f64::from_le_bytes))
            .collect::<Result<Vec<_>>>()?;
        samples.push(LabeledSample {
            tokens: Tensor::new(vec![spec.tokens, spec.channels], data)?,
            id,
            domain,
        });
    }
    Ok(Dataset { spec, samples })
}

/// Shuffled order of `pool`, for callers that need a deterministic pass.
pub fn shuffled(pool: &[usize], rng: &mut impl Rng) -> Vec<usize> {
    let mut v = pool.to_vec();
    v.shuffle(rng);
    v
}
