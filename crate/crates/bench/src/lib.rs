//! Shared fixtures for the benchmarks.

use nwpm_core::experiment::{pet_setup, preset, FamilySpec};
use nwpm_core::pet::{Kinetics, NoiseKind, PetModel, PetPrior, PetSetup};
use nwpm_core::toy::toy_simulate;
use nwpm_core::{ground_truth_field, RegionMask, ToyModel, ToyModelParams};

/// Acquisition setup of the PET presets.
pub fn setup() -> PetSetup {
    match preset("pet-sim").expect("preset").family {
        FamilySpec::Pet(spec) => pet_setup(&spec).expect("setup"),
        FamilySpec::Toy(_) => unreachable!("pet-sim is a PET study"),
    }
}

pub fn pet_model() -> PetModel {
    PetModel::new(setup(), PetPrior::default(), NoiseKind::Normal, 3).expect("model")
}

pub fn two_compartment() -> Kinetics {
    Kinetics::new(vec![4.9e-3, 1.8e-3], vec![5e-4, 0.011]).expect("kinetics")
}

/// The two-order toy model and data on the 20×20 mask.
pub fn toy_data() -> (ToyModel, Vec<f64>, usize, usize) {
    let params = ToyModelParams { mu0: vec![5.0, -5.0], sigma0: 5.0, sigma: 1.0 };
    let regions = [(0, 0), (1, 1), (2, 1), (3, 1)].into_iter().collect();
    let truth = ground_truth_field(&RegionMask::default_20x20(), &regions, 2).expect("truth");
    let y = toy_simulate(&truth, &params, 7).expect("data");
    (ToyModel::new(params).expect("model"), y, truth.width(), truth.height())
}
