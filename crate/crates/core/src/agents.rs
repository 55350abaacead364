//! Home-level buyers and sellers.
//!
//! Utility parameters are private to each agent. The auction only ever sees
//! the market messages produced through [`BuyingAgent`] and [`SellingAgent`]:
//! a monetary bid from a buyer and a supply quantity from a seller.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Concave increasing utility of a quantity of energy.
///
/// Records deserialize by field names: `{x, y}` is logarithmic,
/// `{a, b}` is quadratic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Utility {
    /// `x ln(y q + 1)`.
    Log { x: f64, y: f64 },
    /// `a q - b q² / 2`, saturating at its peak `q = a / b`.
    Quadratic { a: f64, b: f64 },
}

impl Utility {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Utility::Log { x, y } => x > 0.0 && y > 0.0 && x.is_finite() && y.is_finite(),
            Utility::Quadratic { a, b } => a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("invalid utility parameters {self:?}")))
        }
    }

    pub fn value(&self, q: f64) -> f64 {
        match *self {
            Utility::Log { x, y } => x * (y * q).ln_1p(),
            Utility::Quadratic { a, b } => {
                let q = q.min(a / b);
                a * q - 0.5 * b * q * q
            }
        }
    }

    pub fn marginal(&self, q: f64) -> f64 {
        match *self {
            Utility::Log { x, y } => x * y / (y * q + 1.0),
            Utility::Quadratic { a, b } => (a - b * q).max(0.0),
        }
    }

    /// Value and derivative at `q ≥ 0`.
    pub fn evaluate(&self, q: f64) -> Result<(f64, f64)> {
        if q < 0.0 {
            return Err(Error::NegativeQuantity(q));
        }
        Ok((self.value(q), self.marginal(q)))
    }

    /// Quantity at which the marginal utility equals `price`, clipped at 0.
    pub fn quantity_at(&self, price: f64) -> f64 {
        match *self {
            Utility::Log { x, y } => (x / price - 1.0 / y).max(0.0),
            Utility::Quadratic { a, b } => ((a - price) / b).max(0.0),
        }
    }

    /// Derivative of [`Utility::quantity_at`] with respect to price.
    pub fn quantity_slope(&self, price: f64) -> f64 {
        if price >= self.marginal(0.0) {
            return 0.0;
        }
        match *self {
            Utility::Log { x, .. } => -x / (price * price),
            Utility::Quadratic { b, .. } => -1.0 / b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Buyer {
    #[serde(flatten)]
    utility: Utility,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Seller {
    #[serde(flatten)]
    utility: Utility,
    /// Generation capacity, pu.
    g: f64,
}

impl Buyer {
    pub fn new(utility: Utility) -> Result<Self> {
        utility.validate()?;
        Ok(Self { utility })
    }

    pub fn log(x: f64, y: f64) -> Result<Self> {
        Self::new(Utility::Log { x, y })
    }

    /// Private parameters; only the simulator and the oracle may read them.
    pub fn utility(&self) -> &Utility {
        &self.utility
    }
}

impl Seller {
    pub fn new(utility: Utility, capacity: f64) -> Result<Self> {
        utility.validate()?;
        if !(capacity >= 0.0 && capacity.is_finite()) {
            return Err(Error::Validation(format!("invalid generation capacity {capacity}")));
        }
        Ok(Self { utility, g: capacity })
    }

    pub fn log(x: f64, y: f64, capacity: f64) -> Result<Self> {
        Self::new(Utility::Log { x, y }, capacity)
    }

    pub fn utility(&self) -> &Utility {
        &self.utility
    }

    pub fn capacity(&self) -> f64 {
        self.g
    }

    /// Utility of keeping `g - supply` for own consumption.
    pub fn retained_value(&self, supply: f64) -> f64 {
        self.utility.value(self.g - supply)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuyerResponse {
    pub demand: f64,
    pub bid: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SellerResponse {
    pub supply: f64,
    /// Multiplier of the capacity constraint `s ≤ g`.
    pub capacity_multiplier: f64,
}

fn check_price(price: f64) -> Result<()> {
    if price > 0.0 && price.is_finite() {
        Ok(())
    } else {
        Err(Error::PriceDomain(price))
    }
}

/// Price-taking optimum: consume until marginal utility meets the price and
/// bid exactly enough money to be allocated that demand.
pub fn buyer_best_response(buyer: &Buyer, price: f64) -> Result<BuyerResponse> {
    check_price(price)?;
    let demand = buyer.utility.quantity_at(price);
    Ok(BuyerResponse {
        demand,
        bid: price * demand,
    })
}

/// Price-taking optimum of `v(g - s) + c s` over `0 ≤ s ≤ g`.
pub fn seller_best_response(seller: &Seller, price: f64) -> Result<SellerResponse> {
    check_price(price)?;
    let retained = seller.utility.quantity_at(price).min(seller.g);
    let supply = seller.g - retained;
    let capacity_multiplier = if retained == 0.0 {
        (price - seller.utility.marginal(0.0)).max(0.0)
    } else {
        0.0
    };
    Ok(SellerResponse {
        supply,
        capacity_multiplier,
    })
}

/// What an aggregator can ask of a buyer: money offered at a posted price.
pub trait BuyingAgent {
    fn bid(&self, price: f64) -> Result<f64>;
}

/// What an aggregator can ask of a seller: energy offered at a posted price.
pub trait SellingAgent {
    fn offer(&self, price: f64) -> Result<f64>;
}

impl BuyingAgent for Buyer {
    fn bid(&self, price: f64) -> Result<f64> {
        Ok(buyer_best_response(self, price)?.bid)
    }
}

impl SellingAgent for Seller {
    fn offer(&self, price: f64) -> Result<f64> {
        Ok(seller_best_response(self, price)?.supply)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn buyer_examples() {
        let r = buyer_best_response(&Buyer::log(1.0, 1.0).unwrap(), 0.5).unwrap();
        assert!((r.demand - 1.0).abs() < 1e-15 && (r.bid - 0.5).abs() < 1e-15);

        let r = buyer_best_response(&Buyer::log(1.0, 1.0).unwrap(), 1.0).unwrap();
        assert_eq!(r.demand, 0.0);
        let r = buyer_best_response(&Buyer::log(1.0, 1.0).unwrap(), 3.0).unwrap();
        assert_eq!(r.demand, 0.0);

        let b = Buyer::log(2.0, 3.0).unwrap();
        let r = buyer_best_response(&b, 1.0).unwrap();
        assert!((r.demand - 5.0 / 3.0).abs() < 1e-14);
        let h = 1e-6;
        let fd = (b.utility().value(r.demand + h) - b.utility().value(r.demand - h)) / (2.0 * h);
        assert!((fd - 1.0).abs() < 1e-8, "{fd}");

        assert!(matches!(buyer_best_response(&b, 0.0), Err(Error::PriceDomain(_))));
        assert!(matches!(buyer_best_response(&b, -1.0), Err(Error::PriceDomain(_))));
    }

    #[test]
    fn seller_examples() {
        let s = Seller::log(1.0, 1.0, 2.0).unwrap();
        let r = seller_best_response(&s, 0.5).unwrap();
        assert!((r.supply - 1.0).abs() < 1e-15);
        assert_eq!(r.capacity_multiplier, 0.0);

        let r = seller_best_response(&s, 2.0).unwrap();
        assert_eq!(r.supply, 2.0);
        assert_eq!(r.capacity_multiplier, 1.0);

        let s = Seller::log(5.0, 1.0, 0.2).unwrap();
        let r = seller_best_response(&s, 1.0).unwrap();
        assert_eq!(r.supply, 0.0);
        assert!(s.utility().marginal(0.2) >= 1.0);
        // Grid search of the payoff over s ∈ [0, g].
        let best = (0..=10_000)
            .map(|i| 0.2 * i as f64 / 10_000.0)
            .map(|q| s.retained_value(q) + q)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(s.retained_value(0.0) >= best - 1e-12);

        assert!(seller_best_response(&s, 0.0).is_err());
    }

    #[test]
    fn utility_values() {
        let u = Utility::Log { x: 1.0, y: 1.0 };
        assert_eq!(u.value(0.0), 0.0);
        assert!((u.value(std::f64::consts::E - 1.0) - 1.0).abs() < 1e-15);
        assert!(matches!(u.evaluate(-0.1), Err(Error::NegativeQuantity(_))));
        let q = Utility::Quadratic { a: 4.0, b: 2.0 };
        assert_eq!(q.value(2.0), 4.0);
        assert_eq!(q.value(3.0), 4.0);
        assert_eq!(q.marginal(3.0), 0.0);
        assert_eq!(q.quantity_at(1.0), 1.5);
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(Buyer::log(0.0, 1.0).is_err());
        assert!(Buyer::log(1.0, -1.0).is_err());
        assert!(Seller::log(1.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn serde_record_shapes() {
        let b: Buyer = serde_json::from_str(r#"{"x": 2.0, "y": 3.0}"#).unwrap();
        assert_eq!(b, Buyer::log(2.0, 3.0).unwrap());
        let s: Seller = serde_json::from_str(r#"{"x": 1.0, "y": 4.0, "g": 0.3}"#).unwrap();
        assert_eq!(s, Seller::log(1.0, 4.0, 0.3).unwrap());
        let q: Buyer = serde_json::from_str(r#"{"a": 5.0, "b": 1.0}"#).unwrap();
        assert_eq!(*q.utility(), Utility::Quadratic { a: 5.0, b: 1.0 });
    }

    fn payoff_grid_max(f: impl Fn(f64) -> f64, hi: f64) -> f64 {
        (0..=100_000)
            .map(|i| f(hi * i as f64 / 100_000.0))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    proptest! {
        #[test]
        fn buyer_response_is_payoff_optimal(x in 0.5f64..500.0, y in 0.5f64..10.0, c in 1.0f64..800.0) {
            let b = Buyer::log(x, y).unwrap();
            let r = buyer_best_response(&b, c).unwrap();
            let payoff = |d: f64| b.utility().value(d) - c * d;
            let hi = (2.0 * r.demand).max(1.0);
            prop_assert!(payoff(r.demand) >= payoff_grid_max(payoff, hi) - 1e-8);
        }

        #[test]
        fn seller_response_is_payoff_optimal(x in 0.5f64..500.0, y in 0.5f64..10.0, g in 0.1f64..0.5, c in 1.0f64..800.0) {
            let s = Seller::log(x, y, g).unwrap();
            let r = seller_best_response(&s, c).unwrap();
            let payoff = |q: f64| s.retained_value(q) + c * q;
            prop_assert!(payoff(r.supply) >= payoff_grid_max(payoff, g) - 1e-8);
            prop_assert!(r.supply >= 0.0 && r.supply <= g);
            prop_assert_eq!(r.capacity_multiplier * (r.supply - g), 0.0);
        }

        #[test]
        fn responses_are_monotone(x in 0.5f64..500.0, y in 0.5f64..10.0, g in 0.1f64..0.5, c in 1.0f64..800.0, dc in 0.0f64..100.0) {
            let b = Buyer::log(x, y).unwrap();
            let s = Seller::log(x, y, g).unwrap();
            prop_assert!(buyer_best_response(&b, c + dc).unwrap().demand <= buyer_best_response(&b, c).unwrap().demand);
            prop_assert!(seller_best_response(&s, c + dc).unwrap().supply >= seller_best_response(&s, c).unwrap().supply);
        }

        #[test]
        fn marginal_matches_finite_difference(x in 0.5f64..500.0, y in 0.5f64..10.0, q in 0.01f64..5.0) {
            let u = Utility::Log { x, y };
            let h = 1e-5 * (1.0 + q);
            let fd = (u.value(q + h) - u.value(q - h)) / (2.0 * h);
            let (_, m) = u.evaluate(q).unwrap();
            prop_assert!((fd - m).abs() <= 1e-6 * m.abs());
        }
    }
}
