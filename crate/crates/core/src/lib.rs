//! Meal-aware bolus insulin titration with a forecast-checked safety loop.
//!
//! [`pipeline`] turns raw records into clips, [`diet`] estimates nutrients
//! from meal text, [`model`] holds the shared titration and forecast network,
//! [`training`] fits and personalizes it, and [`safety`] checks every plan
//! against a glucose forecast before release.
//!
//! Research software. Not a medical device and not for clinical use.

pub mod audit;
pub mod context;
pub mod diet;
pub mod fixtures;
pub mod forecast;
pub mod llm;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod safety;
pub mod titration;
pub mod training;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/nutrients.md")]
    mod nutrients {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/safety.md")]
    mod safety {}
    #[doc = include_str!("../../../book/src/interfaces.md")]
    mod interfaces {}
}
