//! Resource trading: owner-side price quotes under the commodity-market and
//! posted-price models, and broker-side negotiation of contracts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{GridDollars, ResourceId, Secs};

pub const DEFAULT_QUOTE_TTL: Secs = 300;
const DAY: Secs = 86_400;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriceModel {
    CommodityMarket,
    PostedPrice,
}

/// A daily interval in seconds after midnight. `start > end` wraps midnight.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DailyWindow {
    pub start: Secs,
    pub end: Secs,
}

impl DailyWindow {
    pub fn contains(&self, time_of_day: Secs) -> bool {
        let t = time_of_day % DAY;
        if self.start <= self.end {
            t >= self.start && t < self.end
        } else {
            t >= self.start || t < self.end
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PricePolicy {
    pub model: PriceModel,
    /// G$ per CPU-second.
    pub base_price: GridDollars,
    #[serde(default = "one")]
    pub peak_multiplier: f64,
    #[serde(default)]
    pub peak_window: Option<DailyWindow>,
    #[serde(default)]
    pub consumer_overrides: BTreeMap<String, f64>,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Error)]
pub enum PolicyError {
    #[error("base price must be positive")]
    ZeroBasePrice,
    #[error("peak multiplier must be >= 1, got {0}")]
    PeakMultiplier(f64),
    #[error("consumer factor for `{0}` must be positive")]
    ConsumerFactor(String),
    #[error("posted-price policies cannot vary by time or consumer")]
    PostedPriceVaries,
}

impl PricePolicy {
    pub fn commodity(base_price: GridDollars) -> Self {
        PricePolicy {
            model: PriceModel::CommodityMarket,
            base_price,
            peak_multiplier: 1.0,
            peak_window: None,
            consumer_overrides: BTreeMap::new(),
        }
    }

    /// A fixed published price: no peak pricing, no per-consumer factors.
    pub fn posted(base_price: GridDollars) -> Self {
        PricePolicy {
            model: PriceModel::PostedPrice,
            ..PricePolicy::commodity(base_price)
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.base_price == 0 {
            return Err(PolicyError::ZeroBasePrice);
        }
        if self.peak_multiplier.is_nan() || self.peak_multiplier < 1.0 {
            return Err(PolicyError::PeakMultiplier(self.peak_multiplier));
        }
        if let Some((c, _)) = self.consumer_overrides.iter().find(|(_, f)| f.is_nan() || **f <= 0.0) {
            return Err(PolicyError::ConsumerFactor(c.clone()));
        }
        if self.model == PriceModel::PostedPrice
            && (self.peak_multiplier != 1.0 || !self.consumer_overrides.is_empty())
        {
            return Err(PolicyError::PostedPriceVaries);
        }
        Ok(())
    }

    /// Price for `consumer` at time-of-day `time_of_day`, rounded half-up.
    pub fn price_at(&self, consumer: &str, time_of_day: Secs) -> GridDollars {
        if self.model == PriceModel::PostedPrice {
            return self.base_price;
        }
        let peak = match self.peak_window {
            Some(w) if w.contains(time_of_day) => self.peak_multiplier,
            _ => 1.0,
        };
        let factor = self.consumer_overrides.get(consumer).copied().unwrap_or(1.0);
        let raw = self.base_price as f64 * peak * factor;
        ((raw + 0.5).floor() as GridDollars).max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriceQuote {
    pub resource: ResourceId,
    pub price: GridDollars,
    pub valid_from: Secs,
    pub valid_until: Secs,
    pub model: PriceModel,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contract {
    pub resource: ResourceId,
    pub price: GridDollars,
    pub established_at: Secs,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rejection {
    TooExpensive,
    QuoteExpired,
    WrongResource,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum TradeError {
    #[error("resource {0} is unavailable")]
    ResourceUnavailable(ResourceId),
}

/// The owner-side trader for one resource.
#[derive(Clone, Debug)]
pub struct Trader {
    pub resource: ResourceId,
    pub policy: PricePolicy,
    pub quote_ttl: Secs,
    /// Time of day at virtual time zero.
    pub clock_origin: Secs,
}

impl Trader {
    pub fn new(resource: ResourceId, policy: PricePolicy) -> Self {
        Trader {
            resource,
            policy,
            quote_ttl: DEFAULT_QUOTE_TTL,
            clock_origin: 0,
        }
    }

    pub fn quote(&self, available: bool, consumer: &str, now: Secs) -> Result<PriceQuote, TradeError> {
        if !available {
            return Err(TradeError::ResourceUnavailable(self.resource.clone()));
        }
        Ok(PriceQuote {
            resource: self.resource.clone(),
            price: self.policy.price_at(consumer, self.clock_origin + now),
            valid_from: now,
            valid_until: now + self.quote_ttl.max(1),
            model: self.policy.model,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContractRequest {
    pub resource: ResourceId,
    pub max_price: GridDollars,
}

/// Accepts `quote` if it is for the requested resource, still valid and no
/// dearer than the request's cap.
pub fn negotiate(request: &ContractRequest, quote: &PriceQuote, now: Secs) -> Result<Contract, Rejection> {
    if request.resource != quote.resource {
        return Err(Rejection::WrongResource);
    }
    if now < quote.valid_from || now > quote.valid_until {
        return Err(Rejection::QuoteExpired);
    }
    if quote.price > request.max_price {
        return Err(Rejection::TooExpensive);
    }
    Ok(Contract {
        resource: quote.resource.clone(),
        price: quote.price,
        established_at: now,
    })
}
