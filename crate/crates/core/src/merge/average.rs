use crate::error::{Error, Result};
use crate::tensor_store::TensorMap;

/// Elementwise mean of `models`, summed in FP64 in the given order and
/// rounded once. The first model supplies metadata and source dtypes.
pub fn average_merge(models: &[&TensorMap]) -> Result<TensorMap> {
    let [first, rest @ ..] = models else {
        return Err(Error::validation("models", "average merging needs at least two models"));
    };
    if rest.is_empty() {
        return Err(Error::validation("models", "average merging needs at least two models"));
    }
    for (i, m) in rest.iter().enumerate() {
        first.check_same_manifest(m, &format!("model #{}", i + 1))?;
    }
    let k = models.len() as f64;
    first.try_par_map(|name, t| {
        let mut acc: Vec<f64> = t.data().iter().map(|&x| x as f64).collect();
        for m in rest {
            for (a, &x) in acc.iter_mut().zip(m.get(name).unwrap().data()) {
                *a += x as f64;
            }
        }
        Ok(t.like(acc.into_iter().map(|s| (s / k) as f32).collect()))
    })
}
