//! Leverage-rate bidding on a synthetic single-slot second-price market.
//!
//! The nominal leverage rate of an ad is the estimated effect per
//! advertising click between two recent days,
//! `sigma = (f(x, T_t) - f(x, T_s)) / (t - s)`, where `s` and `t` are raw
//! daily click counts and `T_k` is the treatment level of `k` clicks
//! truncated at `n - 1`. Experiment ads bid
//! `max(kappa * sigma / sigma_bar * gamma * cvr * ip, floor)`; baseline
//! ads bid `gamma * cvr * ip`.
//!
//! Replay is deterministic. Click draws are one uniform per log row and
//! the organic noise is one normal per ad and day, both independent of
//! the bids, so two policies replayed on the same log share them.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::OutcomeModel;
use crate::synthetic::{sample_context, GenConfig, GroundTruth};

/// Bid floor as a fraction of the baseline bid `gamma * cvr * ip`.
pub const FLOOR_FRACTION: f64 = 0.01;

const CLICK_STREAM: u64 = 0xc11c_0001;
const NOISE_STREAM: u64 = 0xc11c_0002;
const SPLIT_STREAM: u64 = 0xc11c_0003;
const MARKET_STREAM: u64 = 0xc11c_0004;

/// Treatment index (1-based) of a daily click count.
pub fn treatment_index(clicks: u32, n_treatments: usize) -> usize {
    (clicks as usize).min(n_treatments - 1) + 1
}

/// `sigma_{s,t}(x)` for the raw click counts `s != t`.
pub fn leverage_rate(model: &dyn OutcomeModel, x: &[f64], s: u32, t: u32) -> Result<f64> {
    if s == t {
        return Err(Error::UndefinedLeverage(s));
    }
    let f = model.predict_all(x)?.swap_remove(0);
    Ok(sigma_from_predictions(&f, s, t))
}

fn sigma_from_predictions(f: &[f64], s: u32, t: u32) -> f64 {
    let n = f.len();
    let alpha = f[treatment_index(t, n) - 1] - f[treatment_index(s, n) - 1];
    alpha / (t as f64 - s as f64)
}

/// `(s, t)` from a chronological click history: `t` is the last day and
/// `s` the most recent earlier day with a different count.
pub fn nominal_pair(history: &[u32]) -> Option<(u32, u32)> {
    let (&t, rest) = history.split_last()?;
    rest.iter().rev().find(|&&s| s != t).map(|&s| (s, t))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LvrRecord {
    pub ad_id: u32,
    pub s: u32,
    pub t: u32,
    pub sigma: f64,
}

/// Nominal leverage rates of `ads` from their click histories, with one
/// model call for the whole group. Ads without two distinct days get
/// [`Error::MissingHistory`].
pub fn nominal_leverage(
    model: &dyn OutcomeModel,
    ads: &[&AdProfile],
    histories: &BTreeMap<u32, Vec<u32>>,
) -> Result<Vec<Result<LvrRecord>>> {
    let pairs: Vec<Option<(u32, u32)>> = ads
        .iter()
        .map(|ad| histories.get(&ad.id).and_then(|h| nominal_pair(h)))
        .collect();
    let contexts: Vec<f64> = ads
        .iter()
        .zip(&pairs)
        .filter(|(_, p)| p.is_some())
        .flat_map(|(ad, _)| ad.context.iter().copied())
        .collect();
    let mut predictions = if contexts.is_empty() {
        Vec::new()
    } else {
        model.predict_all(&contexts)?
    }
    .into_iter();
    Ok(ads
        .iter()
        .zip(pairs)
        .map(|(ad, pair)| match pair {
            None => Err(Error::MissingHistory(ad.id)),
            Some((s, t)) => {
                let f = predictions.next().expect("one prediction per pair");
                let sigma = sigma_from_predictions(&f, s, t);
                if sigma.is_finite() {
                    Ok(LvrRecord {
                        ad_id: ad.id,
                        s,
                        t,
                        sigma,
                    })
                } else {
                    Err(Error::NonFiniteLoss {
                        term: "leverage rate",
                        sample: Some(ad.id as usize),
                    })
                }
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BidParams {
    /// Inverse expected ROI.
    pub gamma: f64,
    pub cvr: f64,
    pub item_price: f64,
    pub kappa: f64,
    /// Mean leverage rate of the experiment group.
    pub sigma_bar: f64,
}

impl BidParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma > 0.0
            && (0.0..=1.0).contains(&self.cvr)
            && self.item_price > 0.0
            && self.kappa >= 0.0
            && self.sigma_bar > 0.0
            && [self.gamma, self.item_price, self.kappa, self.sigma_bar]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid bid parameters {self:?}")))
        }
    }

    /// Baseline bid `gamma * cvr * ip`.
    pub fn base(&self) -> f64 {
        self.gamma * self.cvr * self.item_price
    }

    pub fn floor(&self) -> f64 {
        FLOOR_FRACTION * self.base()
    }
}

/// `kappa * (sigma / sigma_bar) * gamma * cvr * ip`, floored at
/// [`FLOOR_FRACTION`] of the baseline bid.
pub fn bid(params: &BidParams, sigma: f64) -> f64 {
    let floor = params.floor();
    if !(sigma > 0.0) {
        return floor;
    }
    (params.kappa * (sigma / params.sigma_bar) * params.base()).max(floor)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Opportunity {
    pub ad_id: u32,
    pub day: u32,
    pub opportunity_id: u32,
    /// Highest competing bid, paid per click by the winner.
    pub competing_price: f64,
    pub click_prob: f64,
}

/// Auction opportunities in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct AuctionLog {
    rows: Vec<Opportunity>,
}

impl AuctionLog {
    pub fn new(rows: Vec<Opportunity>) -> Result<Self> {
        for (k, o) in rows.iter().enumerate() {
            let message = if !(o.competing_price > 0.0 && o.competing_price.is_finite()) {
                format!("competing price {} is not positive", o.competing_price)
            } else if !(0.0..=1.0).contains(&o.click_prob) {
                format!("click probability {} is outside [0, 1]", o.click_prob)
            } else {
                continue;
            };
            return Err(Error::MalformedRow { row: k + 1, message });
        }
        Ok(AuctionLog { rows })
    }

    pub fn rows(&self) -> &[Opportunity] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Distinct days in increasing order.
    pub fn days(&self) -> Vec<u32> {
        self.rows
            .iter()
            .map(|o| o.day)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn day(&self, day: u32) -> AuctionLog {
        AuctionLog {
            rows: self.rows.iter().filter(|o| o.day == day).copied().collect(),
        }
    }

    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut rows = Vec::new();
        for (k, rec) in rdr.deserialize().enumerate() {
            rows.push(rec.map_err(|e| Error::MalformedRow {
                row: k + 1,
                message: e.to_string(),
            })?);
        }
        AuctionLog::new(rows)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        AuctionLog::from_csv_reader(file)
    }

    pub fn to_csv_writer<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        for o in &self.rows {
            wtr.serialize(o).map_err(csv_error)?;
        }
        wtr.flush().map_err(|e| Error::io("<auction log>", e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.to_csv_writer(file)
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::io("<csv>", std::io::Error::other(e.to_string()))
}

fn day_rng(seed: u64, stream: u64, day: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stream);
    rng.set_stream(day as u64);
    rng
}

/// Clicks and cost of one ad on one day.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AuctionResult {
    pub ad_clicks: u32,
    pub cost: f64,
}

/// Second-price pay-per-click replay of `log` under per-ad `bids`. An ad
/// wins an opportunity iff its bid exceeds the competing price and pays
/// that price when the click lands. Ads absent from `bids` do not bid.
/// Results are keyed by `(day, ad_id)` for every bidding ad and log day.
pub fn replay_auctions(log: &AuctionLog, bids: &BTreeMap<u32, f64>, seed: u64) -> BTreeMap<(u32, u32), AuctionResult> {
    let mut out = BTreeMap::new();
    for day in log.days() {
        for &id in bids.keys() {
            out.insert((day, id), AuctionResult::default());
        }
        let mut rng = day_rng(seed, CLICK_STREAM, day);
        for o in log.rows.iter().filter(|o| o.day == day) {
            let u: f64 = rng.random();
            let Some(&b) = bids.get(&o.ad_id) else { continue };
            if b > o.competing_price && u < o.click_prob {
                let r = out.get_mut(&(day, o.ad_id)).expect("bidding ad");
                r.ad_clicks += 1;
                r.cost += o.competing_price;
            }
        }
    }
    out
}

/// Total cost of a replay, summed in key order.
pub fn total_cost(results: &BTreeMap<(u32, u32), AuctionResult>) -> f64 {
    results.values().map(|r| r.cost).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub ad_clicks: f64,
    pub cost: f64,
    pub all_clicks: f64,
    pub organic_clicks: f64,
}

impl GroupMetrics {
    fn add(&mut self, o: &AdDay) {
        self.ad_clicks += o.ad_clicks as f64;
        self.cost += o.cost;
        self.all_clicks += o.all_clicks;
        self.organic_clicks += o.organic_clicks;
    }

    fn sum(&self, other: &GroupMetrics) -> GroupMetrics {
        GroupMetrics {
            ad_clicks: self.ad_clicks + other.ad_clicks,
            cost: self.cost + other.cost,
            all_clicks: self.all_clicks + other.all_clicks,
            organic_clicks: self.organic_clicks + other.organic_clicks,
        }
    }
}

/// Outcome of one ad on one day.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdDay {
    pub day: u32,
    pub ad_id: u32,
    pub ad_clicks: u32,
    pub cost: f64,
    /// `m(x, T_k)` at the realized click level plus noise, clipped at 0.
    pub all_clicks: f64,
    /// `max(all_clicks - ad_clicks, 0)`.
    pub organic_clicks: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub ad_days: Vec<AdDay>,
    pub total: GroupMetrics,
}

impl ReplayReport {
    pub fn group(&self, ids: &BTreeSet<u32>) -> GroupMetrics {
        let mut g = GroupMetrics::default();
        for o in self.ad_days.iter().filter(|o| ids.contains(&o.ad_id)) {
            g.add(o);
        }
        g
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarketConfig {
    pub n_ads: usize,
    /// Daily opportunities per ad. At most `n - 1` keeps every daily click
    /// count on the treatment scale.
    pub opportunities_per_ad: usize,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub cvr_min: f64,
    pub cvr_max: f64,
    /// Median item price; prices are log-normal.
    pub item_price_median: f64,
    pub item_price_log_sd: f64,
    /// Median competing price relative to the ad's baseline bid.
    pub competition_level: f64,
    pub competition_log_sd: f64,
    /// Median ad-level click-through rate; rates are log-normal across ads.
    pub ctr_median: f64,
    pub ctr_log_sd: f64,
    /// Per-opportunity click probability is the ad's rate times a uniform
    /// factor in `[1 - jitter, 1 + jitter]`, capped at 1.
    pub ctr_jitter: f64,
    pub seed: u64,
}

impl Default for MarketConfig {
    fn default() -> Self {
        MarketConfig {
            n_ads: 250,
            opportunities_per_ad: 4,
            gamma_min: 0.8,
            gamma_max: 1.2,
            cvr_min: 0.02,
            cvr_max: 0.1,
            item_price_median: 50.0,
            item_price_log_sd: 0.5,
            competition_level: 1.0,
            competition_log_sd: 0.5,
            ctr_median: 0.4,
            ctr_log_sd: 0.8,
            ctr_jitter: 0.5,
            seed: 0,
        }
    }
}

impl MarketConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("market: {m}")));
        if self.n_ads == 0 || self.opportunities_per_ad == 0 {
            return bad("n_ads and opportunities_per_ad must be >= 1");
        }
        if !(self.gamma_min > 0.0 && self.gamma_min <= self.gamma_max) {
            return bad("need 0 < gamma_min <= gamma_max");
        }
        if !(self.cvr_min > 0.0 && self.cvr_min <= self.cvr_max && self.cvr_max <= 1.0) {
            return bad("need 0 < cvr_min <= cvr_max <= 1");
        }
        if !(self.item_price_median > 0.0 && self.competition_level > 0.0) {
            return bad("item_price_median and competition_level must be > 0");
        }
        if !(self.item_price_log_sd >= 0.0 && self.competition_log_sd >= 0.0) {
            return bad("log standard deviations must be >= 0");
        }
        if !(self.ctr_median > 0.0 && self.ctr_median <= 1.0 && self.ctr_log_sd >= 0.0) {
            return bad("need 0 < ctr_median <= 1 and ctr_log_sd >= 0");
        }
        if !(0.0..=1.0).contains(&self.ctr_jitter) {
            return bad("ctr_jitter must be in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdProfile {
    pub id: u32,
    pub context: Vec<f64>,
    pub gamma: f64,
    pub cvr: f64,
    pub item_price: f64,
    pub ctr: f64,
}

impl AdProfile {
    pub fn base_bid(&self) -> f64 {
        self.gamma * self.cvr * self.item_price
    }

    pub fn params(&self, kappa: f64, sigma_bar: f64) -> BidParams {
        BidParams {
            gamma: self.gamma,
            cvr: self.cvr,
            item_price: self.item_price,
            kappa,
            sigma_bar,
        }
    }
}

/// Ads of a synthetic world and the organic response to their clicks.
#[derive(Debug, Clone, PartialEq)]
pub struct Market {
    pub config: MarketConfig,
    pub ads: Vec<AdProfile>,
    pub truth: GroundTruth,
}

impl Market {
    pub fn new(world: &GenConfig, truth: GroundTruth, config: MarketConfig) -> Result<Self> {
        config.validate()?;
        world.validate()?;
        if world.dim() != truth.feature_mean.len() || world.n_treatments != truth.n_treatments {
            return Err(Error::Config("market world does not match the ground truth".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ MARKET_STREAM);
        let ads = (0..config.n_ads)
            .map(|k| {
                let context = sample_context(world, &mut rng);
                let gamma = rng.random_range(config.gamma_min..=config.gamma_max);
                let cvr = rng.random_range(config.cvr_min..=config.cvr_max);
                let z: f64 = StandardNormal.sample(&mut rng);
                let w: f64 = StandardNormal.sample(&mut rng);
                AdProfile {
                    id: k as u32,
                    context,
                    gamma,
                    cvr,
                    item_price: config.item_price_median * (config.item_price_log_sd * z).exp(),
                    ctr: (config.ctr_median * (config.ctr_log_sd * w).exp()).min(1.0),
                }
            })
            .collect();
        Ok(Market { config, ads, truth })
    }

    pub fn ad(&self, id: u32) -> Option<&AdProfile> {
        self.ads.get(id as usize).filter(|a| a.id == id)
    }

    pub fn ids(&self) -> BTreeSet<u32> {
        self.ads.iter().map(|a| a.id).collect()
    }

    /// Auction log of one day: `opportunities_per_ad` rows per ad with a
    /// log-normal competing price around the ad's baseline bid and a click
    /// probability around the ad's click-through rate.
    pub fn auction_log(&self, day: u32) -> AuctionLog {
        let c = &self.config;
        let mut rng = day_rng(c.seed, MARKET_STREAM, day);
        let mut rows = Vec::with_capacity(self.ads.len() * c.opportunities_per_ad);
        for ad in &self.ads {
            for k in 0..c.opportunities_per_ad {
                let z: f64 = StandardNormal.sample(&mut rng);
                let jitter = rng.random_range(1.0 - c.ctr_jitter..=1.0 + c.ctr_jitter);
                let click_prob = (ad.ctr * jitter).min(1.0);
                rows.push(Opportunity {
                    ad_id: ad.id,
                    day,
                    opportunity_id: k as u32,
                    competing_price: ad.base_bid() * c.competition_level * (c.competition_log_sd * z).exp(),
                    click_prob,
                });
            }
        }
        AuctionLog { rows }
    }

    pub fn auction_logs(&self, days: std::ops::Range<u32>) -> AuctionLog {
        AuctionLog {
            rows: days.flat_map(|d| self.auction_log(d).rows).collect(),
        }
    }

    /// Organic noise of every ad on `day`, one standard normal per ad in
    /// id order.
    fn noise(&self, seed: u64, day: u32) -> Vec<f64> {
        let mut rng = day_rng(seed, NOISE_STREAM, day);
        self.ads.iter().map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    /// Second-price replay plus the all-channel and organic response.
    pub fn replay(&self, log: &AuctionLog, bids: &BTreeMap<u32, f64>, seed: u64) -> Result<ReplayReport> {
        for o in log.rows() {
            if self.ad(o.ad_id).is_none() {
                return Err(Error::MalformedRow {
                    row: 0,
                    message: format!("unknown ad {} in auction log", o.ad_id),
                });
            }
        }
        let auctions = replay_auctions(log, bids, seed);
        let mut ad_days = Vec::with_capacity(auctions.len());
        let mut total = GroupMetrics::default();
        let mut noise: Option<(u32, Vec<f64>)> = None;
        for (&(day, id), r) in &auctions {
            if noise.as_ref().is_none_or(|(d, _)| *d != day) {
                noise = Some((day, self.noise(seed, day)));
            }
            let ad = self
                .ad(id)
                .ok_or_else(|| Error::Config(format!("unknown ad {id} in bids")))?;
            let z = noise.as_ref().expect("noise for day").1[id as usize];
            let mean = self
                .truth
                .outcome_mean(&ad.context, treatment_index(r.ad_clicks, self.truth.n_treatments))?;
            let all_clicks = (mean + self.truth.noise_std * z).max(0.0);
            let o = AdDay {
                day,
                ad_id: id,
                ad_clicks: r.ad_clicks,
                cost: r.cost,
                all_clicks,
                organic_clicks: (all_clicks - r.ad_clicks as f64).max(0.0),
            };
            total.add(&o);
            ad_days.push(o);
        }
        Ok(ReplayReport { ad_days, total })
    }
}

pub fn baseline_bids<'a>(ads: impl IntoIterator<Item = &'a AdProfile>) -> BTreeMap<u32, f64> {
    ads.into_iter().map(|a| (a.id, a.base_bid())).collect()
}

/// Leverage-rate bids for `ads`; an ad without a rate in `sigma` keeps
/// its baseline bid.
pub fn lvr_bids<'a>(
    ads: impl IntoIterator<Item = &'a AdProfile>,
    sigma: &BTreeMap<u32, f64>,
    sigma_bar: f64,
    kappa: f64,
) -> BTreeMap<u32, f64> {
    ads.into_iter()
        .map(|a| {
            let b = match sigma.get(&a.id) {
                Some(&s) => bid(&a.params(kappa, sigma_bar), s),
                None => a.base_bid(),
            };
            (a.id, b)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KappaConfig {
    pub kappa_min: f64,
    pub kappa_max: f64,
    /// Relative cost gap accepted as parity.
    pub tolerance: f64,
    pub max_steps: usize,
}

impl Default for KappaConfig {
    fn default() -> Self {
        KappaConfig {
            kappa_min: 0.1,
            kappa_max: 10.0,
            tolerance: 0.01,
            max_steps: 40,
        }
    }
}

impl KappaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa_min > 0.0 && self.kappa_min < self.kappa_max && self.kappa_max.is_finite()) {
            return Err(Error::Config("need 0 < kappa_min < kappa_max".into()));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::Config("kappa tolerance must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub kappa: f64,
    pub cost: f64,
    pub target: f64,
    /// `|cost - target| / target`.
    pub relative_gap: f64,
    /// Bisection midpoints evaluated.
    pub steps: usize,
    pub within_tolerance: bool,
}

/// Bisection in `ln kappa` on a nondecreasing cost curve. Returns the
/// first point within tolerance, or the closest point seen after
/// `max_steps` midpoints.
pub fn bisect_kappa(
    mut cost_at: impl FnMut(f64) -> Result<f64>,
    target: f64,
    cfg: &KappaConfig,
) -> Result<Calibration> {
    cfg.validate()?;
    if !(target > 0.0 && target.is_finite()) {
        return Err(Error::Config(format!("baseline cost must be > 0, got {target}")));
    }
    let gap = |c: f64| (c - target).abs() / target;
    let (mut lo, mut hi) = (cfg.kappa_min, cfg.kappa_max);
    let (cost_lo, cost_hi) = (cost_at(lo)?, cost_at(hi)?);
    if cost_lo > target * (1.0 + cfg.tolerance) || cost_hi < target * (1.0 - cfg.tolerance) {
        return Err(Error::Bracket {
            kappa_min: lo,
            kappa_max: hi,
            cost_min: cost_lo,
            cost_max: cost_hi,
            target,
        });
    }
    let mut best = if gap(cost_lo) <= gap(cost_hi) {
        (lo, cost_lo)
    } else {
        (hi, cost_hi)
    };
    let mut steps = 0;
    while steps < cfg.max_steps {
        let mid = (lo * hi).sqrt();
        let cost = cost_at(mid)?;
        steps += 1;
        if gap(cost) < gap(best.1) {
            best = (mid, cost);
        }
        if gap(cost) <= cfg.tolerance {
            best = (mid, cost);
            break;
        }
        if cost < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let within_tolerance = gap(best.1) <= cfg.tolerance;
    if !within_tolerance {
        log::warn!(
            "kappa calibration stopped at gap {:.4} > {:.4}; the cost curve steps across the tolerance",
            gap(best.1),
            cfg.tolerance
        );
    }
    Ok(Calibration {
        kappa: best.0,
        cost: best.1,
        target,
        relative_gap: gap(best.1),
        steps,
        within_tolerance,
    })
}

/// Calibrates `kappa` so the replay cost of `group` under leverage-rate
/// bids matches `target`.
pub fn calibrate_kappa(
    log: &AuctionLog,
    group: &[&AdProfile],
    sigma: &BTreeMap<u32, f64>,
    sigma_bar: f64,
    target: f64,
    cfg: &KappaConfig,
    seed: u64,
) -> Result<Calibration> {
    bisect_kappa(
        |kappa| {
            let bids = lvr_bids(group.iter().copied(), sigma, sigma_bar, kappa);
            Ok(total_cost(&replay_auctions(log, &bids, seed)))
        },
        target,
        cfg,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Lvr,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Days before the experiment, all ads on baseline bids.
    pub history_days: u32,
    pub experiment_days: u32,
    pub experiment_fraction: f64,
    /// Policy of the experiment group; `baseline` gives an A/A test.
    pub experiment_policy: PolicyKind,
    pub kappa: KappaConfig,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            history_days: 3,
            experiment_days: 7,
            experiment_fraction: 0.5,
            experiment_policy: PolicyKind::Lvr,
            kappa: KappaConfig::default(),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.history_days < 2 {
            return Err(Error::Config(
                "history_days must be >= 2 for a nominal leverage rate".into(),
            ));
        }
        if self.experiment_days == 0 {
            return Err(Error::Config("experiment_days must be >= 1".into()));
        }
        if !(self.experiment_fraction > 0.0 && self.experiment_fraction < 1.0) {
            return Err(Error::Config("experiment_fraction must be in (0, 1)".into()));
        }
        self.kappa.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    History,
    Experiment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayRecord {
    pub day: u32,
    pub phase: Phase,
    pub kappa: Option<f64>,
    pub calibration: Option<Calibration>,
    pub sigma_bar: Option<f64>,
    /// Experiment ads bidding baseline for lack of two distinct days.
    pub missing_history: usize,
    pub experiment: GroupMetrics,
    pub control: GroupMetrics,
    /// Experiment ads replayed on baseline bids, same log and noise.
    pub counterfactual: GroupMetrics,
    /// Experiment-over-control ratios divided by their history-period
    /// value.
    pub ratio_ad_clicks: Option<f64>,
    pub ratio_all_clicks: Option<f64>,
    pub ratio_organic_clicks: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    /// Normalized experiment-over-control ratios over experiment days.
    pub ratio_ad_clicks: Option<f64>,
    pub ratio_all_clicks: Option<f64>,
    pub ratio_organic_clicks: Option<f64>,
    /// Experiment group over its own baseline replay.
    pub paired_ad_clicks: Option<f64>,
    pub paired_all_clicks: Option<f64>,
    pub paired_organic_clicks: Option<f64>,
    pub paired_cost: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub market: MarketConfig,
    pub config: ExperimentConfig,
    pub experiment_ads: Vec<u32>,
    pub control_ads: Vec<u32>,
    pub days: Vec<DayRecord>,
    pub summary: ExperimentSummary,
}

fn ratio(a: f64, b: f64) -> Option<f64> {
    let r = a / b;
    r.is_finite().then_some(r)
}

fn normalized(exp: f64, ctrl: f64, pre: Option<f64>) -> Option<f64> {
    ratio(ratio(exp, ctrl)?, pre?)
}

pub const SERIES_HEADER: [&str; 21] = [
    "day",
    "phase",
    "kappa",
    "sigma_bar",
    "missing_history",
    "experiment_ad_clicks",
    "experiment_cost",
    "experiment_all_clicks",
    "experiment_organic_clicks",
    "control_ad_clicks",
    "control_cost",
    "control_all_clicks",
    "control_organic_clicks",
    "counterfactual_ad_clicks",
    "counterfactual_cost",
    "counterfactual_all_clicks",
    "counterfactual_organic_clicks",
    "ratio_ad_clicks",
    "ratio_all_clicks",
    "ratio_organic_clicks",
    "calibration_gap",
];

impl ExperimentReport {
    /// Tidy per-day series, one row per day.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let g = |m: &GroupMetrics| [m.ad_clicks, m.cost, m.all_clicks, m.organic_clicks].map(|v| v.to_string());
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(SERIES_HEADER).map_err(csv_error)?;
        for d in &self.days {
            let mut row = vec![
                d.day.to_string(),
                match d.phase {
                    Phase::History => "history".into(),
                    Phase::Experiment => "experiment".into(),
                },
                opt(d.kappa),
                opt(d.sigma_bar),
                d.missing_history.to_string(),
            ];
            row.extend(g(&d.experiment));
            row.extend(g(&d.control));
            row.extend(g(&d.counterfactual));
            row.extend([
                opt(d.ratio_ad_clicks),
                opt(d.ratio_all_clicks),
                opt(d.ratio_organic_clicks),
                opt(d.calibration.map(|c| c.relative_gap)),
            ]);
            wtr.write_record(&row).map_err(csv_error)?;
        }
        wtr.flush().map_err(|e| Error::io("<series>", e))
    }
}

/// Multi-day experiment. Every ad bids baseline for `history_days`; then
/// a random experiment group switches to leverage-rate bids with `kappa`
/// calibrated each day so the group's cost on that day's log matches its
/// baseline cost on the same log. `log` defaults to the market's own
/// logs for every day.
pub fn run_experiment(
    market: &Market,
    model: &dyn OutcomeModel,
    log: Option<&AuctionLog>,
    cfg: &ExperimentConfig,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    if model.n_treatments() != market.truth.n_treatments || model.input_dim() != market.truth.feature_mean.len() {
        return Err(Error::Config("model does not match the market world".into()));
    }
    let total_days = cfg.history_days + cfg.experiment_days;
    let generated;
    let log = match log {
        Some(l) => l,
        None => {
            generated = market.auction_logs(0..total_days);
            &generated
        }
    };
    let days = log.days();
    if days.len() < total_days as usize {
        return Err(Error::Config(format!(
            "auction log covers {} days, the experiment needs {total_days}",
            days.len()
        )));
    }

    let mut ids: Vec<u32> = market.ads.iter().map(|a| a.id).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ SPLIT_STREAM));
    let n_exp = ((ids.len() as f64 * cfg.experiment_fraction).round() as usize).clamp(1, ids.len() - 1);
    let exp_ids: BTreeSet<u32> = ids[..n_exp].iter().copied().collect();
    let ctrl_ids: BTreeSet<u32> = ids[n_exp..].iter().copied().collect();
    let exp_ads: Vec<&AdProfile> = market.ads.iter().filter(|a| exp_ids.contains(&a.id)).collect();

    let baseline = baseline_bids(&market.ads);
    let mut histories: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    let mut records = Vec::with_capacity(total_days as usize);
    let (mut pre_exp, mut pre_ctrl) = (GroupMetrics::default(), GroupMetrics::default());
    let mut pre: Option<[Option<f64>; 3]> = None;
    let (mut sum_exp, mut sum_ctrl, mut sum_cf) = (
        GroupMetrics::default(),
        GroupMetrics::default(),
        GroupMetrics::default(),
    );

    for (k, &day) in days.iter().take(total_days as usize).enumerate() {
        let day_log = log.day(day);
        let counterfactual = market.replay(&day_log, &baseline, cfg.seed)?;
        let history = (k as u32) < cfg.history_days;

        let (realized, kappa, calibration, sigma_bar, missing) =
            if history || cfg.experiment_policy == PolicyKind::Baseline {
                (counterfactual.clone(), None, None, None, 0)
            } else {
                let mut sigma = BTreeMap::new();
                let mut missing = 0;
                for r in nominal_leverage(model, &exp_ads, &histories)? {
                    match r {
                        Ok(rec) => {
                            sigma.insert(rec.ad_id, rec.sigma);
                        }
                        Err(Error::MissingHistory(_)) => missing += 1,
                        Err(e) => return Err(e),
                    }
                }
                if sigma.is_empty() {
                    return Err(Error::Config(format!(
                        "day {day}: no experiment ad has a leverage rate"
                    )));
                }
                let sigma_bar = sigma.values().sum::<f64>() / sigma.len() as f64;
                if !(sigma_bar > 0.0) {
                    return Err(Error::Config(format!(
                        "day {day}: mean leverage rate {sigma_bar} is not positive"
                    )));
                }
                let target = counterfactual.group(&exp_ids).cost;
                let cal = calibrate_kappa(&day_log, &exp_ads, &sigma, sigma_bar, target, &cfg.kappa, cfg.seed)?;
                let mut bids = baseline.clone();
                bids.extend(lvr_bids(exp_ads.iter().copied(), &sigma, sigma_bar, cal.kappa));
                (
                    market.replay(&day_log, &bids, cfg.seed)?,
                    Some(cal.kappa),
                    Some(cal),
                    Some(sigma_bar),
                    missing,
                )
            };

        for o in &realized.ad_days {
            histories.entry(o.ad_id).or_default().push(o.ad_clicks);
        }
        let (e, c, cf) = (
            realized.group(&exp_ids),
            realized.group(&ctrl_ids),
            counterfactual.group(&exp_ids),
        );
        if history {
            pre_exp = pre_exp.sum(&e);
            pre_ctrl = pre_ctrl.sum(&c);
        } else {
            if pre.is_none() {
                pre = Some([
                    ratio(pre_exp.ad_clicks, pre_ctrl.ad_clicks),
                    ratio(pre_exp.all_clicks, pre_ctrl.all_clicks),
                    ratio(pre_exp.organic_clicks, pre_ctrl.organic_clicks),
                ]);
            }
            sum_exp = sum_exp.sum(&e);
            sum_ctrl = sum_ctrl.sum(&c);
            sum_cf = sum_cf.sum(&cf);
        }
        let p = pre.unwrap_or([None; 3]);
        records.push(DayRecord {
            day,
            phase: if history { Phase::History } else { Phase::Experiment },
            kappa,
            calibration,
            sigma_bar,
            missing_history: missing,
            experiment: e,
            control: c,
            counterfactual: cf,
            ratio_ad_clicks: normalized(e.ad_clicks, c.ad_clicks, p[0]),
            ratio_all_clicks: normalized(e.all_clicks, c.all_clicks, p[1]),
            ratio_organic_clicks: normalized(e.organic_clicks, c.organic_clicks, p[2]),
        });
    }

    let p = pre.unwrap_or([None; 3]);
    let summary = ExperimentSummary {
        ratio_ad_clicks: normalized(sum_exp.ad_clicks, sum_ctrl.ad_clicks, p[0]),
        ratio_all_clicks: normalized(sum_exp.all_clicks, sum_ctrl.all_clicks, p[1]),
        ratio_organic_clicks: normalized(sum_exp.organic_clicks, sum_ctrl.organic_clicks, p[2]),
        paired_ad_clicks: ratio(sum_exp.ad_clicks, sum_cf.ad_clicks),
        paired_all_clicks: ratio(sum_exp.all_clicks, sum_cf.all_clicks),
        paired_organic_clicks: ratio(sum_exp.organic_clicks, sum_cf.organic_clicks),
        paired_cost: ratio(sum_exp.cost, sum_cf.cost),
    };
    Ok(ExperimentReport {
        market: market.config.clone(),
        config: cfg.clone(),
        experiment_ads: exp_ids.into_iter().collect(),
        control_ads: ctrl_ids.into_iter().collect(),
        days: records,
        summary,
    })
}

/// One-sided sign-test p-value `P(X >= positives)` for `X ~ Bin(n, 1/2)`.
pub fn sign_test_p(positives: usize, n: usize) -> f64 {
    let mut p = 0.0;
    let mut binom = 1.0f64;
    for k in 0..=n {
        if k > 0 {
            binom = binom * (n + 1 - k) as f64 / k as f64;
        }
        if k >= positives {
            p += binom;
        }
    }
    p / 2f64.powi(n as i32)
}
