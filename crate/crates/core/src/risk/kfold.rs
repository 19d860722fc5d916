use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::datagen::stream;
use crate::error::{Error, Result};
use crate::model::{Dataset, PenalizedModel};
use crate::solver::{fit, SolverConfig};

/// Seeded partition of `0..n` into `k` folds: a uniform permutation cut into
/// contiguous blocks, the first `n % k` blocks one element longer.
pub fn kfold_partition(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > n {
        return Err(Error::InvalidParameter(format!("need 2 <= K <= n, got K = {k}, n = {n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut stream(seed, "kfold", k as u64));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        folds.push(perm[start..start + len].to_vec());
        start += len;
    }
    Ok(folds)
}

/// K-fold cross-validation risk: each point's loss under the fit that held
/// out its fold, averaged over all `n` points.
pub fn kfold_risk(model: &PenalizedModel, data: &Dataset, k: usize, seed: u64, cfg: &SolverConfig) -> Result<f64> {
    let folds = kfold_partition(data.n(), k, seed)?;
    let fold_losses: Vec<f64> = folds
        .par_iter()
        .map(|test| {
            let mut in_test = vec![false; data.n()];
            test.iter().for_each(|&i| in_test[i] = true);
            let train: Vec<usize> = (0..data.n()).filter(|&i| !in_test[i]).collect();
            let fitted = fit(model, &data.select(&train)?, None, cfg)?;
            Ok(test
                .iter()
                .map(|&i| model.loss().value(data.y()[i] - data.row(i).dot(&fitted.beta_hat)))
                .sum::<f64>())
        })
        .collect::<Result<_>>()?;
    Ok(fold_losses.iter().sum::<f64>() / data.n() as f64)
}
