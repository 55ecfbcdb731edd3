//! Benchmark fixtures shared by the criterion targets.

use imbopt::data::{make_gaussian_mixture, ImbalanceProfile, MixtureSpec, Split};

/// Binary mixture with the given minority size and imbalance ratio.
pub fn binary_split(n_minor: usize, ratio: f64, dim: usize, seed: u64) -> Split {
    make_gaussian_mixture(
        &ImbalanceProfile::Binary { ratio, n_minor },
        &MixtureSpec {
            dim,
            separation: 3.0,
            offset: 4.0,
        },
        seed,
    )
    .expect("valid mixture")
}
