//! Synthetic voice-assistant dataset generator. Real interaction data is not
//! available, so this module fabricates labeled ranking sets with controlled
//! statistics (intent count, first-hypothesis error, information-state
//! informativeness) plus paired unlabeled sets drawn from a base distribution
//! P and a shifted distribution Q.

use crate::dataset::RequestRecord;
use crate::error::{Error, Result};
use crate::featurizer::{IntentCandidate, InformationState, MAX_TOKENS, NUM_ATTRIBUTES, NUM_SCORES};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const NUM_DOMAINS: usize = 7;
pub const MAX_INTENTS: usize = 43;
pub const DEFAULT_MEAN_INTENTS: f64 = 9.0;
pub const DEFAULT_FIRST_ERROR: f64 = 0.41;
/// Probability that a distractor shares the gold intent's domain.
const SAME_DOMAIN_P: f64 = 0.25;
/// Informative attributes: preferred domain, active context, and a block of
/// weaker domain-correlated flags.
const N_FLAG_ATTRS: usize = 8;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GenConfig {
    pub n_requests: usize,
    pub mean_intents: f64,
    pub rho: f64,
    pub first_error_target: f64,
    /// Score temperature for the shifted distribution Q (1.0 = no shift).
    pub tau: f64,
    /// Score offset for Q.
    pub delta: f64,
    /// Per-token replacement probability in Q.
    pub token_drift: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_requests: 1000,
            mean_intents: DEFAULT_MEAN_INTENTS,
            rho: 0.8,
            first_error_target: DEFAULT_FIRST_ERROR,
            tau: 1.0,
            delta: 0.0,
            token_drift: 0.0,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_requests == 0 {
            return Err(Error::validation("n_requests must be positive"));
        }
        if !(1.0..=MAX_INTENTS as f64).contains(&self.mean_intents) {
            return Err(Error::validation("mean_intents outside [1, 43]"));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::validation("rho outside [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.first_error_target) {
            return Err(Error::validation("first_error_target outside [0, 1)"));
        }
        if self.tau <= 0.0 {
            return Err(Error::validation("tau must be positive"));
        }
        Ok(())
    }
}

struct Template {
    tokens: &'static [&'static str],
    labels: &'static [&'static str],
    slot_pool: &'static [&'static str],
    slot_pos: usize,
}

struct Domain {
    name: &'static str,
    templates: &'static [Template],
}

macro_rules! tpl {
    ($tokens:expr, $labels:expr, $pool:expr, $pos:expr) => {
        Template {
            tokens: &$tokens,
            labels: &$labels,
            slot_pool: &$pool,
            slot_pos: $pos,
        }
    };
}

static DOMAINS: [Domain; NUM_DOMAINS] = [
    Domain {
        name: "music",
        templates: &[
            tpl!(["play", "songs", "by", "_"], ["O", "O", "O", "B-artist"],
                 ["adele", "prince", "queen", "nirvana", "coltrane", "bjork"], 3),
            tpl!(["shuffle", "my", "_", "playlist"], ["O", "O", "B-playlist", "O"],
                 ["workout", "focus", "roadtrip", "chill", "party"], 2),
            tpl!(["skip", "this", "track"], ["O", "O", "O"], [], 0),
            tpl!(["turn", "volume", "_"], ["O", "O", "B-level"],
                 ["up", "down", "max"], 2),
        ],
    },
    Domain {
        name: "weather",
        templates: &[
            tpl!(["weather", "in", "_"], ["O", "O", "B-city"],
                 ["lisbon", "oslo", "kyoto", "denver", "nairobi", "quito"], 2),
            tpl!(["will", "it", "rain", "_"], ["O", "O", "O", "B-day"],
                 ["today", "tomorrow", "sunday"], 3),
            tpl!(["how", "cold", "is", "it"], ["O", "O", "O", "O"], [], 0),
        ],
    },
    Domain {
        name: "shopping",
        templates: &[
            tpl!(["add", "_", "to", "my", "cart"], ["O", "B-item", "O", "O", "O"],
                 ["batteries", "detergent", "coffee", "sponges", "olives"], 1),
            tpl!(["reorder", "_"], ["O", "B-item"],
                 ["filters", "dogfood", "razors", "tea"], 1),
            tpl!(["track", "my", "order"], ["O", "O", "O"], [], 0),
            tpl!(["price", "of", "_"], ["O", "O", "B-item"],
                 ["headphones", "kettle", "charger"], 2),
        ],
    },
    Domain {
        name: "home",
        templates: &[
            tpl!(["turn", "_", "the", "lights"], ["O", "B-state", "O", "O"],
                 ["on", "off"], 1),
            tpl!(["set", "thermostat", "to", "_"], ["O", "O", "O", "B-temp"],
                 ["sixty", "seventy", "cool", "eco"], 3),
            tpl!(["lock", "the", "_", "door"], ["O", "O", "B-door", "O"],
                 ["front", "back", "garage"], 2),
        ],
    },
    Domain {
        name: "people",
        templates: &[
            tpl!(["who", "is", "_"], ["O", "O", "B-person"],
                 ["curie", "mandela", "hopper", "turing", "kahlo"], 2),
            tpl!(["how", "old", "is", "_"], ["O", "O", "O", "B-person"],
                 ["messi", "rihanna", "obama"], 3),
            tpl!(["spouse", "of", "_"], ["O", "O", "B-person"],
                 ["lincoln", "beyonce", "einstein"], 2),
        ],
    },
    Domain {
        name: "places",
        templates: &[
            tpl!(["capital", "of", "_"], ["O", "O", "B-country"],
                 ["peru", "kenya", "laos", "norway", "fiji"], 2),
            tpl!(["population", "of", "_"], ["O", "O", "B-place"],
                 ["tokyo", "lagos", "iceland", "mumbai"], 2),
            tpl!(["where", "is", "_"], ["O", "O", "B-place"],
                 ["zanzibar", "patagonia", "bhutan"], 2),
        ],
    },
    Domain {
        name: "science",
        templates: &[
            tpl!(["boiling", "point", "of", "_"], ["O", "O", "O", "B-substance"],
                 ["water", "ethanol", "mercury", "nitrogen"], 3),
            tpl!(["what", "is", "_"], ["O", "O", "B-concept"],
                 ["photosynthesis", "entropy", "osmosis", "inertia"], 2),
            tpl!(["distance", "to", "_"], ["O", "O", "B-body"],
                 ["mars", "moon", "pluto"], 2),
        ],
    },
];

/// Geometric success parameter fitted by bisection so that the truncated
/// distribution over [1, max] has the requested mean.
pub fn fit_geometric(mean: f64, max: usize) -> Result<f64> {
    if !(1.0 < mean && mean < max as f64) {
        return Err(Error::validation(format!(
            "mean {mean} not in (1, {max})"
        )));
    }
    let mean_of = |g: f64| -> f64 {
        let mut z = 0.0;
        let mut m = 0.0;
        for k in 1..=max {
            let w = (1.0 - g).powi(k as i32 - 1);
            z += w;
            m += k as f64 * w;
        }
        m / z
    };
    let (mut lo, mut hi) = (1e-9, 1.0 - 1e-9); // mean decreases in g
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_of(mid) > mean {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Truncated-geometric pmf over [1, max].
pub fn intent_count_pmf(mean: f64, max: usize) -> Result<Vec<f64>> {
    let g = fit_geometric(mean, max)?;
    let raw: Vec<f64> = (1..=max).map(|k| (1.0 - g).powi(k as i32 - 1)).collect();
    let z: f64 = raw.iter().sum();
    Ok(raw.iter().map(|w| w / z).collect())
}

fn sample_pmf<R: Rng>(pmf: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in pmf.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    pmf.len() - 1
}

fn clamp01(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

struct Sampler<'a> {
    cfg: &'a GenConfig,
    pmf: Vec<f64>,
    /// P(gold is the top hypothesis | more than one intent), calibrated so
    /// the overall first-hypothesis error hits the configured target.
    gold_first_p: f64,
    noise_vocabs: Vec<Vec<String>>,
}

impl<'a> Sampler<'a> {
    fn new(cfg: &'a GenConfig) -> Result<Self> {
        cfg.validate()?;
        let pmf = intent_count_pmf(cfg.mean_intents, MAX_INTENTS)?;
        let p_multi = 1.0 - pmf[0];
        if cfg.first_error_target > p_multi {
            return Err(Error::validation(format!(
                "first_error_target {} unreachable: P(k>1) = {p_multi:.4}",
                cfg.first_error_target
            )));
        }
        let gold_first_p = 1.0 - cfg.first_error_target / p_multi;
        // fixed per-attribute vocabularies for the uninformative tail
        let mut vocab_rng = ChaCha8Rng::seed_from_u64(0x6e01_5eed);
        let noise_vocabs = (0..NUM_ATTRIBUTES)
            .map(|a| {
                (0..5)
                    .map(|v| format!("v{a}_{v}_{}", vocab_rng.gen_range(0..100)))
                    .collect()
            })
            .collect();
        Ok(Sampler {
            cfg,
            pmf,
            gold_first_p,
            noise_vocabs,
        })
    }

    fn intent_from(
        &self,
        domain: usize,
        template: usize,
        base_score: f64,
        relevance: u32,
        rng: &mut ChaCha8Rng,
    ) -> IntentCandidate {
        let t = &DOMAINS[domain].templates[template];
        let mut tokens: Vec<String> = t.tokens.iter().map(|s| s.to_string()).collect();
        if !t.slot_pool.is_empty() {
            tokens[t.slot_pos] = t.slot_pool.choose(rng).unwrap().to_string();
        }
        let labels: Vec<String> = t.labels.iter().map(|s| s.to_string()).collect();
        debug_assert!(tokens.len() <= MAX_TOKENS);
        let noise = Normal::new(0.0, 0.08).unwrap();
        let mut scores = Vec::with_capacity(NUM_SCORES);
        scores.push(base_score);
        for _ in 1..NUM_SCORES {
            scores.push(clamp01(base_score + noise.sample(rng)));
        }
        IntentCandidate {
            scores,
            tokens,
            slot_labels: labels,
            relevance,
        }
    }

    fn info_state(&self, gold_domain: usize, gold_template: usize, rng: &mut ChaCha8Rng) -> InformationState {
        let mut attributes = BTreeMap::new();
        let informative = |rng: &mut ChaCha8Rng| rng.gen::<f64>() < self.cfg.rho;
        let dom = if informative(rng) {
            gold_domain
        } else {
            rng.gen_range(0..NUM_DOMAINS)
        };
        attributes.insert("attr_000".to_string(), DOMAINS[dom].name.to_string());
        let ctx = if informative(rng) {
            format!("{}#{}", DOMAINS[gold_domain].name, gold_template)
        } else {
            let d = rng.gen_range(0..NUM_DOMAINS);
            format!("{}#{}", DOMAINS[d].name, rng.gen_range(0..DOMAINS[d].templates.len()))
        };
        attributes.insert("attr_001".to_string(), ctx);
        for f in 0..N_FLAG_ATTRS {
            let v = if informative(rng) {
                (gold_domain + f) % 3
            } else {
                rng.gen_range(0..3)
            };
            attributes.insert(format!("attr_{:03}", 2 + f), format!("f{v}"));
        }
        for a in (2 + N_FLAG_ATTRS)..NUM_ATTRIBUTES {
            let v = self.noise_vocabs[a].choose(rng).unwrap().clone();
            attributes.insert(format!("attr_{a:03}"), v);
        }
        InformationState { attributes }
    }

    fn request(&self, id: String, rng: &mut ChaCha8Rng) -> RequestRecord {
        let k = sample_pmf(&self.pmf, rng) + 1;
        let gold_domain = rng.gen_range(0..NUM_DOMAINS);
        let gold_template = rng.gen_range(0..DOMAINS[gold_domain].templates.len());

        // gold quality sits above the distractor band so score remains a
        // useful (but fallible) signal even when gold is not ranked first
        let gold_score = rng.gen_range(0.55..0.95);
        let mut intents = vec![self.intent_from(gold_domain, gold_template, gold_score, 2, rng)];
        for _ in 1..k {
            let (d, rel) = if rng.gen::<f64>() < SAME_DOMAIN_P {
                (gold_domain, 1)
            } else {
                let mut d = rng.gen_range(0..NUM_DOMAINS - 1);
                if d >= gold_domain {
                    d += 1;
                }
                (d, 0)
            };
            let t = rng.gen_range(0..DOMAINS[d].templates.len());
            let s = rng.gen_range(0.20..gold_score.min(0.80));
            intents.push(self.intent_from(d, t, s, rel, rng));
        }
        if k > 1 && rng.gen::<f64>() > self.gold_first_p {
            // promote one distractor above the gold hypothesis
            let j = rng.gen_range(1..k);
            let boosted = clamp01(gold_score + rng.gen_range(0.02..0.10));
            let delta = boosted - intents[j].scores[0];
            for s in intents[j].scores.iter_mut() {
                *s = clamp01(*s + delta);
            }
        }
        intents.sort_by(|a, b| b.scores[0].partial_cmp(&a.scores[0]).unwrap());
        let info_state = self.info_state(gold_domain, gold_template, rng);
        RequestRecord {
            request_id: id,
            intents,
            info_state,
        }
    }

    /// Apply the Q-distribution shift to a generated record: affine score
    /// transform (temperature + offset) and token drift.
    fn shift(&self, rec: &mut RequestRecord, rng: &mut ChaCha8Rng) {
        for intent in &mut rec.intents {
            for s in intent.scores.iter_mut() {
                let x = *s;
                *s = clamp01((x - 0.5) * self.cfg.tau + 0.5 + self.cfg.delta);
            }
            for tok in intent.tokens.iter_mut() {
                if rng.gen::<f64>() < self.cfg.token_drift {
                    *tok = format!("{tok}z"); // spelling drift from retrained ASR
                }
            }
        }
    }
}

pub fn gen_request(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Result<RequestRecord> {
    let sampler = Sampler::new(cfg)?;
    Ok(sampler.request("r0".to_string(), rng))
}

fn gen_set(cfg: &GenConfig, n: usize, prefix: &str, stream: u64, shifted: bool) -> Result<Vec<RequestRecord>> {
    let sampler = Sampler::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rec = sampler.request(format!("{prefix}-{i:06}"), &mut rng);
        if shifted {
            sampler.shift(&mut rec, &mut rng);
        }
        out.push(rec);
    }
    Ok(out)
}

pub struct LabeledSplits {
    pub train: Vec<RequestRecord>,
    pub validation: Vec<RequestRecord>,
    pub test: Vec<RequestRecord>,
}

/// Default split sizes 12,000 / 4,000 / 8,000 multiplied by `scale`.
pub fn gen_labeled(cfg: &GenConfig, scale: f64) -> Result<LabeledSplits> {
    if scale <= 0.0 {
        return Err(Error::validation("scale must be positive"));
    }
    let size = |base: usize| ((base as f64 * scale).round() as usize).max(1);
    Ok(LabeledSplits {
        train: gen_set(cfg, size(12_000), "train", 1, false)?,
        validation: gen_set(cfg, size(4_000), "valid", 2, false)?,
        test: gen_set(cfg, size(8_000), "test", 3, false)?,
    })
}

/// Paired unlabeled sets: P from base parameters, Q from the configured
/// shift. Default base size 80,000 multiplied by `scale`.
pub fn gen_unlabeled_pair(cfg: &GenConfig, scale: f64) -> Result<(Vec<RequestRecord>, Vec<RequestRecord>)> {
    if scale <= 0.0 {
        return Err(Error::validation("scale must be positive"));
    }
    let n = ((80_000f64 * scale).round() as usize).max(1);
    let p = gen_set(cfg, n, "p", 4, false)?;
    let q = gen_set(cfg, n, "q", 5, true)?;
    Ok((p, q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn geometric_fit_hits_mean() {
        let pmf = intent_count_pmf(9.0, MAX_INTENTS).unwrap();
        let mean: f64 = pmf.iter().enumerate().map(|(i, p)| (i + 1) as f64 * p).sum();
        assert_relative_eq!(mean, 9.0, epsilon = 1e-6);
        assert_relative_eq!(pmf.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn intent_counts_in_range_and_mean_close() {
        let cfg = GenConfig {
            n_requests: 10_000,
            ..Default::default()
        };
        let recs = gen_set(&cfg, 10_000, "t", 9, false).unwrap();
        let mut total = 0usize;
        for r in &recs {
            assert!((1..=MAX_INTENTS).contains(&r.intents.len()));
            total += r.intents.len();
        }
        let mean = total as f64 / recs.len() as f64;
        assert!((mean - 9.0).abs() < 0.3, "mean intents {mean}");
    }

    #[test]
    fn first_hypothesis_error_calibrated() {
        let cfg = GenConfig {
            seed: 5,
            ..Default::default()
        };
        let recs = gen_set(&cfg, 5000, "t", 10, false).unwrap();
        let wrong = recs
            .iter()
            .filter(|r| r.gold_index().unwrap() != 0)
            .count();
        let err = wrong as f64 / recs.len() as f64;
        assert!((err - DEFAULT_FIRST_ERROR).abs() < 0.02, "error {err}");
    }

    #[test]
    fn records_validate_against_featurizer_preconditions() {
        let cfg = GenConfig {
            seed: 2,
            ..Default::default()
        };
        for rec in gen_set(&cfg, 500, "t", 11, false).unwrap() {
            rec.validate().unwrap();
            assert_eq!(rec.info_state.attributes.len(), NUM_ATTRIBUTES);
        }
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        let cfg = GenConfig {
            seed: 3,
            ..Default::default()
        };
        let splits = gen_labeled(&cfg, 0.01).unwrap();
        assert_eq!(splits.train.len(), 120);
        assert_eq!(splits.validation.len(), 40);
        assert_eq!(splits.test.len(), 80);
        let mut ids: Vec<&str> = splits
            .train
            .iter()
            .chain(&splits.validation)
            .chain(&splits.test)
            .map(|r| r.request_id.as_str())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 240);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = GenConfig {
            seed: 8,
            ..Default::default()
        };
        let a = gen_labeled(&cfg, 0.005).unwrap();
        let b = gen_labeled(&cfg, 0.005).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn identity_shift_leaves_q_statistically_equal() {
        let cfg = GenConfig {
            seed: 4,
            tau: 1.0,
            delta: 0.0,
            token_drift: 0.0,
            ..Default::default()
        };
        let (p, q) = gen_unlabeled_pair(&cfg, 0.005).unwrap();
        assert_eq!(p.len(), q.len());
        let mean_top = |set: &[RequestRecord]| -> f64 {
            set.iter().map(|r| r.intents[0].scores[0]).sum::<f64>() / set.len() as f64
        };
        assert!((mean_top(&p) - mean_top(&q)).abs() < 0.01);
    }

    #[test]
    fn default_shift_moves_scores() {
        let cfg = GenConfig {
            seed: 4,
            tau: 1.3,
            delta: 0.08,
            token_drift: 0.15,
            ..Default::default()
        };
        let (p, q) = gen_unlabeled_pair(&cfg, 0.002).unwrap();
        let mean_top = |set: &[RequestRecord]| -> f64 {
            set.iter().map(|r| r.intents[0].scores[0]).sum::<f64>() / set.len() as f64
        };
        assert!(mean_top(&q) > mean_top(&p) + 0.03);
        let drifted = q
            .iter()
            .flat_map(|r| &r.intents)
            .flat_map(|i| &i.tokens)
            .filter(|t| t.ends_with('z'))
            .count();
        assert!(drifted > 0);
    }

    #[test]
    fn rho_zero_breaks_info_state_correlation() {
        let cfg = GenConfig {
            seed: 6,
            rho: 0.0,
            ..Default::default()
        };
        let recs = gen_set(&cfg, 4000, "t", 12, false).unwrap();
        // attr_000 matches the gold domain only at chance (1/7)
        let matches = recs
            .iter()
            .filter(|r| {
                let gold = &r.intents[r.gold_index().unwrap()];
                let dom = DOMAINS
                    .iter()
                    .find(|d| {
                        d.templates.iter().any(|t| {
                            t.tokens.first().map(|w| *w) == gold.tokens.first().map(|s| s.as_str())
                        })
                    })
                    .map(|d| d.name);
                dom == Some(r.info_state.attributes["attr_000"].as_str())
            })
            .count() as f64
            / recs.len() as f64;
        assert!(matches < 0.25, "match rate {matches}");
    }
}
