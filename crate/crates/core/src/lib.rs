//! Histogram-based gradient boosting for multi-class classification.
//!
//! Four methods share one tree builder and one replay path:
//!
//! * `mart` and `robustlogit` fit `K` trees per iteration on the classical
//!   logistic-loss derivatives, with first-order and second-order split gain
//!   respectively;
//! * `abcmart` and `abcrobustlogit` pick a base class per iteration, fit
//!   `K-1` trees on the sum-to-zero derivatives and derive the base score.
//!   The base class is chosen by the `(s, g, w)` schedule in [`boost`].
//!
//! ```no_run
//! use abcboost_core::{fit, BoostConfig, Method};
//! use abcboost_core::data::{load_dataset, Format, LoadOptions};
//!
//! let train = load_dataset("letter.train.csv", Format::Csv, LoadOptions::default())?;
//! let config = BoostConfig { method: Method::AbcRobustLogit, iterations: 200, ..Default::default() };
//! let (model, training) = fit(&config, &train, None)?;
//! println!("final loss {}", training.records.last().unwrap().train_loss);
//! model.save("letter.model.json")?;
//! # Ok::<(), abcboost_core::Error>(())
//! ```

pub mod boost;
pub mod data;
mod error;
pub mod logit;
pub mod model;
pub mod tree;

pub use boost::{BoostConfig, IterationRecord, Method, Training};
pub use data::{BinMap, BinnedDataset, RawDataset};
pub use error::{Error, Result};
pub use model::{evaluate, EnsembleModel, EvalReport, Predictions};

/// Bin `train`, run the configured boosting method and package the result
/// as a self-contained model. When `test` is given, per-iteration test
/// errors are recorded.
pub fn fit(config: &BoostConfig, train: &RawDataset, test: Option<&RawDataset>) -> Result<(EnsembleModel, Training)> {
    fit_with(config, train, test, |_| {})
}

/// [`fit`] with a callback invoked after every iteration.
pub fn fit_with<F>(
    config: &BoostConfig,
    train: &RawDataset,
    test: Option<&RawDataset>,
    mut on_iteration: F,
) -> Result<(EnsembleModel, Training)>
where
    F: FnMut(&IterationRecord),
{
    config.validate(train.num_classes())?;
    let bin_map = data::fit_bins(train, config.max_bins)?;
    let binned = data::apply_bins(train, &bin_map)?;
    let test = test
        .map(|t| data::apply_bins_with_classes(t, &bin_map, train.classes()))
        .transpose()?;
    let training = boost::train_with(config, &binned, test.as_ref(), |record, _| on_iteration(record))?;
    let model = EnsembleModel::new(training.ensemble.clone(), bin_map, train.classes().to_vec())?;
    Ok((model, training))
}
