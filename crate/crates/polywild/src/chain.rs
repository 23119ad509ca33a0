//! Closed-chain algebra of five-point configurations.
//!
//! For t ∈ (0,1)^5 the cyclic system P_{k+1} = t_k X_k + (1 - t_k) P_k (indices mod 5)
//! has the unique solution P_i = Σ_j ν_i^j X_j with
//! ν_{k+1}^{k-m} = (1 - t_k)…(1 - t_{k-m+1}) t_{k-m} / t and t = 1 - Π_k (1 - t_k).

use crate::scalar::Field;

/// Rejected chain parameters.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("chain parameter t[{index}] must lie in (0,1)")]
pub struct ChainDomainError {
    pub index: usize,
}

/// Coefficient matrix ν with P_i = Σ_j ν[i][j] X_j. Generic over exact and floating fields.
pub fn chain_coefficients<T: Field>(t: &[T; 5]) -> Result<[[T; 5]; 5], ChainDomainError> {
    let zero = T::zero();
    let one = T::one();
    for (index, &tk) in t.iter().enumerate() {
        if !(tk > zero && tk < one) {
            return Err(ChainDomainError { index });
        }
    }
    let prod = t.iter().fold(one, |p, &tk| p * (one - tk));
    let total = one - prod;
    let mut nu = [[zero; 5]; 5];
    for k in 0..5 {
        let row = (k + 1) % 5;
        let mut carry = one;
        for m in 0..5 {
            let j = (k + 5 - m) % 5;
            nu[row][j] = carry * t[j] / total;
            carry = carry * (one - t[j]);
        }
    }
    Ok(nu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Ratio;

    #[test]
    fn halves_give_powers_of_two_exactly() {
        let h = Ratio::new(1i64, 2);
        let nu = chain_coefficients(&[h; 5]).unwrap();
        let base = [16, 8, 4, 2, 1].map(|n| Ratio::new(n as i64, 31));
        for (i, row) in nu.iter().enumerate() {
            for (m, b) in base.iter().enumerate() {
                assert_eq!(row[(i + 4 + 5 - m) % 5], *b);
            }
        }
    }

    #[test]
    fn rejects_boundary_values() {
        assert_eq!(chain_coefficients(&[0.5, 0.5, 1.0, 0.5, 0.5]), Err(ChainDomainError { index: 2 }));
        assert!(chain_coefficients(&[0.0, 0.5, 0.5, 0.5, 0.5]).is_err());
    }

    #[test]
    fn near_one_collapses() {
        let nu = chain_coefficients(&[0.999f64; 5]).unwrap();
        for k in 0..5 {
            for j in 0..5 {
                let want = if j == k { 1.0 } else { 0.0 };
                assert!((nu[(k + 1) % 5][j] - want).abs() < 1e-2);
            }
        }
    }
}
