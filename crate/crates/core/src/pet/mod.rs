//! Plasma-input compartmental models for dynamic PET.

mod image;
mod input;
mod kinetics;
mod likelihood;
mod schedule;

pub use image::{simulate_pet_image, PetImage};
pub use input::PlasmaInput;
pub use kinetics::{tissue_concentration, tissue_curve, volume_of_distribution, ConvolutionPlan, Kinetics};
pub use likelihood::{
    from_unconstrained, log_gamma_sample, log_likelihood_normal, log_likelihood_t, params_volume, CompartmentParams,
    Noise, NoiseKind, PetModel, PetPrior, PetSetup,
};
pub use schedule::FrameSchedule;
