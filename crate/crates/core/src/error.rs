use thiserror::Error;

use crate::backbone::ModelError;
use crate::dps::DpsError;
use crate::event_io::EventIoError;
use crate::frame_builder::FrameError;
use crate::head::HeadError;
use crate::loss::LossError;
use crate::metrics::MetricsError;
use crate::nn::NnError;
use crate::sa_moe::MoeError;
use crate::weights::WeightsError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    EventIo(#[from] EventIoError),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Weights(#[from] WeightsError),
    #[error(transparent)]
    Moe(#[from] MoeError),
    #[error(transparent)]
    Dps(#[from] DpsError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("invalid tracker input: {0}")]
    Tracker(String),
    #[error("config: {0}")]
    Config(String),
}
