//! Named driver and terminal families, selectable from configuration
//! files by name plus numeric parameters.

use crate::error::{Error, Result};
use crate::lattice::TimeGrid;
use crate::noise::{LevyModel, PathEnsemble};
use crate::solver::{Driver, DriverFlags, LawMarginal, TerminalData};
use std::collections::BTreeMap;

/// Numeric parameters as parsed from a config file.
pub type Params = BTreeMap<String, f64>;

/// One named parameter of a registry entry.
#[derive(Debug, Clone, Copy)]
pub struct ParamSpec {
    pub name: &'static str,
    /// `None` marks a required parameter.
    pub default: Option<f64>,
    pub doc: &'static str,
}

struct Resolved(BTreeMap<&'static str, f64>);

impl Resolved {
    fn get(&self, name: &str) -> f64 {
        self.0[name]
    }
}

fn resolve(kind: &str, name: &str, specs: &[ParamSpec], params: &Params) -> Result<Resolved> {
    let mut out = BTreeMap::new();
    for spec in specs {
        match params.get(spec.name) {
            Some(v) if v.is_finite() => {
                out.insert(spec.name, *v);
            }
            Some(v) => {
                return Err(Error::Problem(format!(
                    "{kind} '{name}': parameter '{}' = {v} is not finite",
                    spec.name
                )));
            }
            None => match spec.default {
                Some(d) => {
                    out.insert(spec.name, d);
                }
                None => {
                    return Err(Error::Problem(format!(
                        "{kind} '{name}': missing required parameter '{}' ({})",
                        spec.name, spec.doc
                    )));
                }
            },
        }
    }
    for key in params.keys() {
        if !specs.iter().any(|s| s.name == key) {
            let accepted: Vec<&str> = specs.iter().map(|s| s.name).collect();
            return Err(Error::Problem(format!(
                "{kind} '{name}': unknown parameter '{key}' (accepted: {})",
                if accepted.is_empty() {
                    "none".to_string()
                } else {
                    accepted.join(", ")
                }
            )));
        }
    }
    Ok(Resolved(out))
}

/// A named driver family.
#[derive(Debug)]
pub struct DriverEntry {
    pub name: &'static str,
    pub doc: &'static str,
    pub params: &'static [ParamSpec],
    build: fn(&Resolved) -> Driver,
    /// Natural Lipschitz constant of the family at these parameters,
    /// used when the config does not declare one.
    default_c: fn(&Resolved) -> f64,
}

impl DriverEntry {
    /// Instantiate the driver; also returns the default Lipschitz constant.
    pub fn build(&self, params: &Params) -> Result<(Driver, f64)> {
        let resolved = resolve("driver", self.name, self.params, params)?;
        Ok(((self.build)(&resolved), (self.default_c)(&resolved).max(1e-9)))
    }
}

/// A named terminal-data family; instantiated against a simulated
/// ensemble because the data may be path-dependent on the window.
#[derive(Debug)]
pub struct TerminalEntry {
    pub name: &'static str,
    pub doc: &'static str,
    pub params: &'static [ParamSpec],
    build: fn(&Resolved, &TimeGrid, &LevyModel, &PathEnsemble, usize) -> Result<TerminalData>,
}

impl TerminalEntry {
    pub fn build(
        &self,
        params: &Params,
        grid: &TimeGrid,
        levy: &LevyModel,
        ensemble: &PathEnsemble,
        d: usize,
    ) -> Result<TerminalData> {
        let resolved = resolve("terminal", self.name, self.params, params)?;
        (self.build)(&resolved, grid, levy, ensemble, d)
    }
}

static DRIVERS: &[DriverEntry] = &[
    DriverEntry {
        name: "zero",
        doc: "f = 0",
        params: &[],
        build: |_| Driver::zero(),
        default_c: |_| 1e-6,
    },
    DriverEntry {
        name: "constant",
        doc: "f = c",
        params: &[ParamSpec {
            name: "c",
            default: None,
            doc: "constant driver value",
        }],
        build: |r| {
            let c = r.get("c");
            Driver::new(DriverFlags::default(), move |_| c)
        },
        default_c: |_| 1e-6,
    },
    DriverEntry {
        name: "linear-y",
        doc: "f = rate * y",
        params: &[ParamSpec {
            name: "rate",
            default: None,
            doc: "coefficient of the current value",
        }],
        build: |r| {
            let rate = r.get("rate");
            Driver::new(
                DriverFlags {
                    uses_y: true,
                    ..Default::default()
                },
                move |args| rate * args.y,
            )
        },
        default_c: |r| r.get("rate").abs(),
    },
    DriverEntry {
        name: "mean-field-linear",
        doc: "f = offset + coef * E[Y]",
        params: &[
            ParamSpec {
                name: "coef",
                default: None,
                doc: "coefficient of the law mean",
            },
            ParamSpec {
                name: "offset",
                default: Some(0.0),
                doc: "constant shift",
            },
        ],
        build: |r| {
            let coef = r.get("coef");
            let offset = r.get("offset");
            Driver::new(
                DriverFlags {
                    uses_law: true,
                    law_marginal: LawMarginal::YOnly,
                    ..Default::default()
                },
                move |args| offset + coef * args.law.mean()[0],
            )
        },
        default_c: |r| r.get("coef").abs(),
    },
    DriverEntry {
        name: "anticipated-one-point",
        doc: "f = offset + coef * A_t (projected one-point future value)",
        params: &[
            ParamSpec {
                name: "coef",
                default: Some(1.0),
                doc: "coefficient of the one-point term",
            },
            ParamSpec {
                name: "offset",
                default: Some(0.0),
                doc: "constant shift",
            },
        ],
        build: |r| {
            let coef = r.get("coef");
            let offset = r.get("offset");
            Driver::new(
                DriverFlags {
                    uses_a: true,
                    ..Default::default()
                },
                move |args| offset + coef * args.a,
            )
        },
        default_c: |r| r.get("coef").abs(),
    },
    DriverEntry {
        name: "anticipated-average",
        doc: "f = offset + coef * averaged future value (discounted window)",
        params: &[
            ParamSpec {
                name: "coef",
                default: Some(1.0),
                doc: "coefficient of the window average",
            },
            ParamSpec {
                name: "offset",
                default: Some(0.0),
                doc: "constant shift",
            },
        ],
        build: |r| {
            let coef = r.get("coef");
            let offset = r.get("offset");
            Driver::new(
                DriverFlags {
                    uses_a_bar: true,
                    ..Default::default()
                },
                move |args| offset + coef * args.a_bar,
            )
        },
        default_c: |r| r.get("coef").abs(),
    },
    DriverEntry {
        name: "jump-gamma-linear",
        doc: "f = offset + coef * gamma (weighted jump coefficient)",
        params: &[
            ParamSpec {
                name: "coef",
                default: None,
                doc: "coefficient of gamma",
            },
            ParamSpec {
                name: "offset",
                default: Some(0.0),
                doc: "constant shift",
            },
        ],
        build: |r| {
            let coef = r.get("coef");
            let offset = r.get("offset");
            Driver::new(
                DriverFlags {
                    uses_gamma: true,
                    ..Default::default()
                },
                move |args| offset + coef * args.gamma,
            )
        },
        default_c: |r| r.get("coef").abs(),
    },
    DriverEntry {
        name: "lipschitz-mix",
        doc: "f = c * (bounded 1-Lipschitz terms in every argument slot and the law mean)",
        params: &[ParamSpec {
            name: "c",
            default: None,
            doc: "overall Lipschitz constant",
        }],
        build: |r| {
            let c = r.get("c");
            Driver::new(
                DriverFlags {
                    uses_y: true,
                    uses_z: true,
                    uses_gamma: true,
                    uses_a: true,
                    uses_b: true,
                    uses_c: true,
                    uses_a_bar: true,
                    uses_b_bar: true,
                    uses_c_bar: true,
                    uses_law: true,
                    law_marginal: LawMarginal::Full,
                },
                move |args| {
                    c * (args.y.sin()
                        + args.z[0].cos()
                        + args.gamma.tanh()
                        + args.a.sin()
                        + args.b[0].cos()
                        + args.c.tanh()
                        + args.a_bar.sin()
                        + args.b_bar[0].cos()
                        + args.c_bar.tanh()
                        + args.law.mean()[0].tanh())
                },
            )
        },
        default_c: |r| r.get("c").abs(),
    },
];

static TERMINALS: &[TerminalEntry] = &[
    TerminalEntry {
        name: "constant",
        doc: "phi = value, phi_z = psi = 0",
        params: &[ParamSpec {
            name: "value",
            default: None,
            doc: "terminal level",
        }],
        build: |r, grid, levy, ensemble, d| {
            TerminalData::constant(
                grid,
                ensemble.n_particles(),
                d,
                levy.n_marks(),
                r.get("value"),
            )
        },
    },
    TerminalEntry {
        name: "deterministic-path",
        doc: "phi_t = value + slope * (t - T), phi_z = psi = 0",
        params: &[
            ParamSpec {
                name: "value",
                default: None,
                doc: "level at the horizon",
            },
            ParamSpec {
                name: "slope",
                default: Some(0.0),
                doc: "linear drift over the window",
            },
        ],
        build: |r, grid, levy, ensemble, d| {
            let value = r.get("value");
            let slope = r.get("slope");
            let t_hor = grid.horizon();
            TerminalData::build(
                grid,
                ensemble.n_particles(),
                d,
                levy.n_marks(),
                |i, _| value + slope * (grid.time(i) - t_hor),
                |_, _, _| 0.0,
                |_, _, _| 0.0,
            )
        },
    },
    TerminalEntry {
        name: "gaussian-endpoint",
        doc: "phi_t = value + scale * W_t (first coordinate), phi_z = scale",
        params: &[
            ParamSpec {
                name: "value",
                default: None,
                doc: "mean level",
            },
            ParamSpec {
                name: "scale",
                default: Some(1.0),
                doc: "loading on the Brownian value",
            },
        ],
        build: |r, grid, levy, ensemble, d| {
            let value = r.get("value");
            let scale = r.get("scale");
            TerminalData::build(
                grid,
                ensemble.n_particles(),
                d,
                levy.n_marks(),
                |i, p| value + scale * ensemble.brownian_at(p, i, 0),
                |_, _, c| if c == 0 { scale } else { 0.0 },
                |_, _, _| 0.0,
            )
        },
    },
    TerminalEntry {
        name: "compensated-jump",
        doc: "phi_t = scale * J_t (compensated weighted jump value), psi_j = scale * l_j",
        params: &[ParamSpec {
            name: "scale",
            default: Some(1.0),
            doc: "loading on the jump value",
        }],
        build: |r, grid, levy, ensemble, d| {
            let scale = r.get("scale");
            TerminalData::build(
                grid,
                ensemble.n_particles(),
                d,
                levy.n_marks(),
                |i, p| scale * ensemble.jump_value_at(p, i),
                |_, _, _| 0.0,
                |_, _, j| scale * levy.weight(j),
            )
        },
    },
];

pub fn drivers() -> &'static [DriverEntry] {
    DRIVERS
}

pub fn terminals() -> &'static [TerminalEntry] {
    TERMINALS
}

fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.iter().enumerate() {
        let mut prev = row[0];
        row[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let cost = if ca == cb { 0 } else { 1 };
            let next = (prev + cost).min(row[j] + 1).min(row[j + 1] + 1);
            prev = row[j + 1];
            row[j + 1] = next;
        }
    }
    row[b.len()]
}

fn unknown_name_error(kind: &str, name: &str, known: &[&str]) -> Error {
    let nearest = known
        .iter()
        .min_by_key(|k| levenshtein(name, k))
        .copied()
        .unwrap_or("");
    Error::Problem(format!(
        "unknown {kind} '{name}' (did you mean '{nearest}'? available: {})",
        known.join(", ")
    ))
}

pub fn find_driver(name: &str) -> Result<&'static DriverEntry> {
    DRIVERS.iter().find(|e| e.name == name).ok_or_else(|| {
        let names: Vec<&str> = DRIVERS.iter().map(|e| e.name).collect();
        unknown_name_error("driver", name, &names)
    })
}

pub fn find_terminal(name: &str) -> Result<&'static TerminalEntry> {
    TERMINALS.iter().find(|e| e.name == name).ok_or_else(|| {
        let names: Vec<&str> = TERMINALS.iter().map(|e| e.name).collect();
        unknown_name_error("terminal", name, &names)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::build_grid;
    use crate::measure::EmpiricalMeasure;
    use crate::noise::simulate_ensemble;
    use crate::solver::DriverArgs;

    #[test]
    fn catalogue_is_nonempty_and_buildable_with_defaults() {
        assert!(!drivers().is_empty());
        assert!(!terminals().is_empty());
        let grid = build_grid(0.5, 0.25, 15).unwrap();
        let levy = LevyModel::new(vec![1.0], vec![2.0], vec![0.5], 1.0).unwrap();
        let ensemble = simulate_ensemble(&grid, &levy, 1, 8, 1).unwrap();
        for entry in drivers() {
            let mut params = Params::new();
            for p in entry.params {
                if p.default.is_none() {
                    params.insert(p.name.to_string(), 0.5);
                }
            }
            let (driver, c) = entry.build(&params).unwrap();
            assert!(c > 0.0);
            let law = EmpiricalMeasure::scalar(vec![0.1, 0.2]).unwrap();
            let z = [0.0];
            let args = DriverArgs {
                t: 0.1,
                y: 0.3,
                z: &z,
                gamma: 0.2,
                a: 0.1,
                b: &z,
                c: 0.0,
                a_bar: 0.0,
                b_bar: &z,
                c_bar: 0.0,
                law: &law,
            };
            assert!(driver.eval(&args).is_finite());
        }
        for entry in terminals() {
            let mut params = Params::new();
            for p in entry.params {
                if p.default.is_none() {
                    params.insert(p.name.to_string(), 1.0);
                }
            }
            let terminal = entry.build(&params, &grid, &levy, &ensemble, 1).unwrap();
            assert_eq!(terminal.n_particles(), 8);
        }
    }

    #[test]
    fn unknown_names_get_a_hint() {
        let err = find_driver("mean-field-liner").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("mean-field-linear"), "{msg}");
        assert!(find_terminal("gausian-endpoint")
            .unwrap_err()
            .to_string()
            .contains("gaussian-endpoint"));
    }

    #[test]
    fn unknown_parameter_rejected() {
        let entry = find_driver("constant").unwrap();
        let mut params = Params::new();
        params.insert("c".into(), 1.0);
        params.insert("sigma".into(), 2.0);
        let err = entry.build(&params).unwrap_err();
        assert!(err.to_string().contains("unknown parameter"), "{err}");
    }

    #[test]
    fn missing_required_parameter_rejected() {
        let entry = find_driver("mean-field-linear").unwrap();
        let err = entry.build(&Params::new()).unwrap_err();
        assert!(err.to_string().contains("missing required"), "{err}");
    }
}
