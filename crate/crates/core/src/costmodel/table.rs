use std::fmt;

use serde::{Deserialize, Serialize};

use super::{comm_cost, memory_cost, CommCost, CostError, MemoryCost, ModelConfig, Strategy};

/// One strategy row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub name: String,
    pub strategy: Strategy,
    pub comm: CommCost,
    pub memory: MemoryCost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostTable {
    pub devices: u64,
    pub rows: Vec<CostRow>,
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// The reference strategies over `n` devices: pure SP-Ulysses, SP-Ring, DP,
/// ZeRO-1, unified SP with ZeRO-1/2/3 (Ulysses degree `gcd(n, kv_heads)`),
/// TP and TP-sp.
pub fn table2(model: &ModelConfig, n: u64) -> Result<CostTable, CostError> {
    if n == 0 {
        return Err(CostError::InvalidStrategy("device count must be positive".into()));
    }
    let base = Strategy::default();
    let u = gcd(n, model.kv_heads);
    let unified = |zero_stage| Strategy {
        ulysses: u,
        ring: n / u,
        zero_stage,
        ..base
    };
    let specs = [
        ("SP-Ulysses", Strategy { ulysses: n, ..base }),
        ("SP-Ring", Strategy { ring: n, ..base }),
        ("DP", Strategy { dp: n, ..base }),
        (
            "ZeRO1",
            Strategy {
                dp: n,
                zero_stage: 1,
                ..base
            },
        ),
        ("SP-Unified+ZeRO1", unified(1)),
        ("SP-Unified+ZeRO2", unified(2)),
        ("SP-Unified+ZeRO3", unified(3)),
        ("TP", Strategy { tp: n, ..base }),
        (
            "TP-sp",
            Strategy {
                tp: n,
                tp_sp: true,
                ..base
            },
        ),
    ];
    let rows = specs
        .into_iter()
        .map(|(name, s)| {
            Ok(CostRow {
                name: name.to_string(),
                strategy: s,
                comm: comm_cost(&s, model)?,
                memory: memory_cost(&s, model)?,
            })
        })
        .collect::<Result<_, CostError>>()?;
    Ok(CostTable { devices: n, rows })
}

fn gib(bytes: f64) -> String {
    format!("{:.3}", bytes / (1u64 << 30) as f64)
}

fn mib(bytes: f64) -> String {
    format!("{:.1}", bytes / (1u64 << 20) as f64)
}

/// Aligned text: comm columns in MiB per block, memory columns in GiB per device.
impl fmt::Display for CostTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let header = [
            "strategy",
            "param collective",
            "param MiB",
            "act collective",
            "act MiB",
            "p2p MiB",
            "P GiB",
            "G GiB",
            "OS GiB",
            "Act GiB",
        ];
        let mut cells: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for r in &self.rows {
            cells.push(vec![
                r.name.clone(),
                r.comm.param_collective.clone(),
                mib(r.comm.param_bytes),
                r.comm.act_collective.clone(),
                mib(r.comm.act_bytes),
                mib(r.comm.ring_p2p_bytes),
                gib(r.memory.params_bytes),
                gib(r.memory.grads_bytes),
                gib(r.memory.optimizer_bytes),
                gib(r.memory.activation_bytes),
            ]);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| cells.iter().map(|row| row[c].len()).max().unwrap_or(0))
            .collect();
        writeln!(f, "N = {}", self.devices)?;
        for row in &cells {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (cell, &w))| {
                    if i == 0 || i == 1 || i == 3 {
                        format!("{cell:<w$}")
                    } else {
                        format!("{cell:>w$}")
                    }
                })
                .collect();
            writeln!(f, "{}", line.join("  ").trim_end())?;
        }
        Ok(())
    }
}
