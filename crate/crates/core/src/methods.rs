//! Built-in methods and tableau resolution.

use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::RealMatrix;
use crate::tableau::{MethodTableau, TableauParams};

pub const BUILTIN_NAMES: [&str; 3] = ["imex-peer2s", "imex-peer3s", "imex-peer4s"];

fn strict_lower(s: usize, vals: &[f64]) -> RealMatrix {
    let mut m = RealMatrix::zeros(s, s);
    let mut k = 0;
    for i in 1..s {
        for j in 0..i {
            m[(i, j)] = vals[k];
            k += 1;
        }
    }
    m
}

fn repeated_rows(row: &[f64]) -> RealMatrix {
    RealMatrix::from_rows(&vec![row.to_vec(); row.len()])
}

fn params_2s() -> TableauParams {
    TableauParams {
        label: "imex-peer2s".into(),
        c: vec![0.591977499693304, 1.0],
        gamma: 0.969486340522434,
        p: repeated_rows(&[-1.082167419515352, 2.082167419515352]),
        r_strict: strict_lower(2, &[-1.007885680522306]),
        s2: strict_lower(2, &[0.819167640511257]),
    }
}

fn params_3s() -> TableauParams {
    TableauParams {
        label: "imex-peer3s".into(),
        c: vec![0.173922498101250, 0.584759944717930, 1.0],
        gamma: 0.456150901216430,
        p: repeated_rows(&[-0.516269158723393, 2.301256858880021, -0.784987700156628]),
        r_strict: strict_lower(
            3,
            &[0.271188675194957, 0.099808771568803, 0.395734854902157],
        ),
        s2: strict_lower(3, &[1.5, 0.204731875658678, 1.32]),
    }
}

fn params_4s() -> TableauParams {
    TableauParams {
        label: "imex-peer4s".into(),
        c: vec![
            -0.926697334544583,
            0.180751924024702,
            0.850343633101352,
            1.0,
        ],
        gamma: 0.413154106969917,
        p: RealMatrix::from_rows(&[
            vec![
                0.164346920652337,
                1.941408294648193,
                -2.764059964877189,
                1.658304749576660,
            ],
            vec![
                0.424734281438207,
                1.133423589655944,
                -0.792340606563880,
                0.234182735469729,
            ],
            vec![
                0.562642125818718,
                0.131525283967289,
                2.162128869126546,
                -1.856296278912553,
            ],
            vec![
                0.589388877693458,
                -0.169092459871472,
                3.071031564759426,
                -2.491327982581412,
            ],
        ]),
        r_strict: strict_lower(
            4,
            &[
                1.186201415903827,
                1.327861645060559,
                0.525143168803633,
                1.324984727912657,
                0.576558985833141,
                0.071014878172581,
            ],
        ),
        s2: strict_lower(
            4,
            &[
                3.884803988586850,
                -3.053336552626494,
                2.821635541838257,
                -3.555025951383727,
                2.895140468767150,
                0.162040780709875,
            ],
        ),
    }
}

/// The free coefficients of a built-in method (16 digits).
pub fn builtin_params(name: &str) -> Result<TableauParams> {
    match name.to_ascii_lowercase().as_str() {
        "imex-peer2s" | "2s" => Ok(params_2s()),
        "imex-peer3s" | "3s" => Ok(params_3s()),
        "imex-peer4s" | "4s" => Ok(params_4s()),
        _ => Err(Error::UnknownMethod(name.to_string())),
    }
}

pub fn builtin(name: &str) -> Result<MethodTableau> {
    builtin_params(name)?.build()
}

pub fn builtins() -> Vec<MethodTableau> {
    BUILTIN_NAMES
        .iter()
        .map(|n| builtin(n).expect("built-in tableau is valid"))
        .collect()
}

pub fn load_tableau(text: &str) -> Result<MethodTableau> {
    MethodTableau::from_text(text)
}

pub fn load_tableau_file(path: &Path) -> Result<MethodTableau> {
    load_tableau(&std::fs::read_to_string(path)?)
}

/// A built-in name, or otherwise a path to a tableau file.
pub fn resolve(name_or_path: &str) -> Result<MethodTableau> {
    match builtin(name_or_path) {
        Err(Error::UnknownMethod(_)) => {
            let path = Path::new(name_or_path);
            if path.exists() {
                load_tableau_file(path)
            } else {
                Err(Error::UnknownMethod(name_or_path.to_string()))
            }
        }
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_aliases_resolve() {
        assert_eq!(builtin("2s").unwrap().label(), "imex-peer2s");
        assert_eq!(builtin("IMEX-Peer4s").unwrap().stages(), 4);
        assert!(matches!(resolve("nope"), Err(Error::UnknownMethod(_))));
    }

    #[test]
    fn builtin_p_rows_sum_to_one() {
        for t in builtins() {
            for i in 0..t.stages() {
                let sum: f64 = t.p().row(i).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12, "{} row {i}", t.label());
            }
        }
    }
}
