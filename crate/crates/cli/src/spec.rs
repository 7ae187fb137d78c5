//! Model and kernel specification strings.
//!
//! Models: `uniform`, `vm:kappa,mu`, `bvm:k1,k2,mu1,mu2,l12`, `exptrace:kappa`,
//! `fisher:f11,f12,...,f33`, `fisherb:b`.
//! Kernels: `vm:eta`, `pvm:eta1,eta2`, `exptrace:eta`, `median`, `auto`.
//! Either may carry a `model=` / `kernel=` prefix.

use mksd::model::BivariateVonMises;
use mksd::{Density, Manifold, ManifoldKernel};
use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

fn split<'a>(s: &'a str, prefix: &str) -> (String, Vec<&'a str>) {
    let s = s.trim();
    let s = s.strip_prefix(prefix).unwrap_or(s);
    match s.split_once(':') {
        Some((name, args)) => (name.trim().to_ascii_lowercase(), args.split(',').map(str::trim).collect()),
        None => (s.to_ascii_lowercase(), Vec::new()),
    }
}

fn numbers(name: &str, args: &[&str], count: usize) -> Result<Vec<f64>> {
    if args.len() != count {
        return Err(CliError::Usage(format!("`{name}` takes {count} parameter(s), got {}", args.len())));
    }
    args.iter()
        .map(|a| a.parse::<f64>().map_err(|_| CliError::Usage(format!("`{name}`: cannot parse `{a}` as a number"))))
        .collect()
}

/// Parses a model spec and checks it lives on `manifold`.
pub fn parse_model(s: &str, manifold: Manifold) -> Result<Density> {
    let (name, args) = split(s, "model=");
    let d = match name.as_str() {
        "uniform" => {
            numbers("uniform", &args, 0)?;
            Density::uniform(manifold)
        }
        "vm" | "vonmises" => {
            let v = numbers("vm", &args, 2)?;
            Density::von_mises(v[0], v[1])?
        }
        "bvm" => {
            let v = numbers("bvm", &args, 5)?;
            Density::bivariate_von_mises(BivariateVonMises::new(v[0], v[1], v[2], v[3], v[4])?)
        }
        "exptrace" => Density::exp_trace(numbers("exptrace", &args, 1)?[0])?,
        "fisher" => Density::fisher(Matrix3::from_row_slice(&numbers("fisher", &args, 9)?))?,
        "fisherb" => Density::fisher_b(numbers("fisherb", &args, 1)?[0])?,
        other => return Err(CliError::Usage(format!("unknown model `{other}`"))),
    };
    if d.manifold() != manifold {
        return Err(CliError::Usage(format!("model `{s}` lives on {}, not {}", d.manifold().name(), manifold.name())));
    }
    Ok(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelSpec {
    Fixed(ManifoldKernel),
    /// Median heuristic on the data being tested.
    Median,
    /// Power-proxy selection on a train half, test on the held-out half.
    Auto,
}

pub fn parse_kernel(s: &str, manifold: Manifold) -> Result<KernelSpec> {
    let (name, args) = split(s, "kernel=");
    let k = match name.as_str() {
        "auto" => return numbers("auto", &args, 0).map(|_| KernelSpec::Auto),
        "median" => return numbers("median", &args, 0).map(|_| KernelSpec::Median),
        "vm" => ManifoldKernel::von_mises(numbers("vm", &args, 1)?[0])?,
        "pvm" => {
            let v = numbers("pvm", &args, 2)?;
            ManifoldKernel::product_von_mises(v[0], v[1])?
        }
        "exptrace" => ManifoldKernel::exp_trace(numbers("exptrace", &args, 1)?[0])?,
        other => return Err(CliError::Usage(format!("unknown kernel `{other}`"))),
    };
    if k.manifold() != manifold {
        return Err(CliError::Usage(format!("kernel `{s}` lives on {}, not {}", k.manifold().name(), manifold.name())));
    }
    Ok(KernelSpec::Fixed(k))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_model_form() {
        assert_eq!(parse_model("uniform", Manifold::So3).unwrap(), Density::uniform(Manifold::So3));
        assert_eq!(parse_model("model=exptrace:0.35", Manifold::So3).unwrap(), Density::exp_trace(0.35).unwrap());
        assert_eq!(parse_model("fisherb:0.2", Manifold::So3).unwrap(), Density::fisher_b(0.2).unwrap());
        let f = parse_model("fisher:1,0,0,0,2,0,0,0,3", Manifold::So3).unwrap();
        assert_eq!(f.fisher_matrix().unwrap()[(1, 1)], 2.0);
        let b = parse_model("bvm:0.7170,0.3954,1.1499,1.1499,-1.1274", Manifold::Torus2).unwrap();
        assert_eq!(b, Density::bivariate_von_mises(mksd::model::wind_bvm()));
        assert!(parse_model("vm:2,1", Manifold::Circle).is_ok());
    }

    #[test]
    fn malformed_specs_are_usage_errors() {
        for (s, m) in [
            ("bvm:1,2", Manifold::Torus2),
            ("gauss:1", Manifold::Circle),
            ("exptrace:abc", Manifold::So3),
            ("exptrace:0.3", Manifold::Circle),
            ("fisherb:1,2", Manifold::So3),
        ] {
            let e = parse_model(s, m).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{s}");
        }
        assert_eq!(parse_kernel("pvm:1", Manifold::Torus2).unwrap_err().exit_code(), 2);
        assert_eq!(parse_kernel("vm:1", Manifold::So3).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn parses_kernels() {
        assert_eq!(parse_kernel("auto", Manifold::So3).unwrap(), KernelSpec::Auto);
        assert_eq!(parse_kernel("kernel=median", Manifold::Circle).unwrap(), KernelSpec::Median);
        assert_eq!(
            parse_kernel("pvm:1,2", Manifold::Torus2).unwrap(),
            KernelSpec::Fixed(ManifoldKernel::product_von_mises(1.0, 2.0).unwrap())
        );
    }
}
