use crate::error::{Error, Result};

/// Oversamples every non-empty group to the size of the largest one by
/// cycling through its members in order. Originals come first.
pub fn resample_balance<T: Clone>(groups: &[Vec<T>]) -> Result<Vec<Vec<T>>> {
    let target = groups.iter().map(Vec::len).max().unwrap_or(0);
    if target == 0 {
        return Err(Error::input("resampling needs at least one non-empty class"));
    }
    Ok(groups
        .iter()
        .map(|g| if g.is_empty() { Vec::new() } else { (0..target).map(|i| g[i % g.len()].clone()).collect() })
        .collect())
}

/// Balanced list of sample indices, grouped by class in class order.
pub fn balance_indices(labels: &[usize], num_classes: usize) -> Result<Vec<usize>> {
    let mut groups = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        groups
            .get_mut(l)
            .ok_or_else(|| Error::input(format!("label {l} out of range for {num_classes} classes")))?
            .push(i);
    }
    Ok(resample_balance(&groups)?.concat())
}
