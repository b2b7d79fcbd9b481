use std::io::{self, Write};

use super::ConvexProgram;

/// Writes the program as COO triplets, one `# section rows cols` header per
/// block, for cross-checking against external solvers. `Q` is written as its
/// upper triangle; infinite bounds are written as `inf`/`-inf`.
pub fn write_coo<W: Write>(program: &ConvexProgram, mut w: W) -> io::Result<()> {
    let n = program.n;
    writeln!(w, "# Q {n} {n} upper")?;
    for &(i, j, v) in &program.quad {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        writeln!(w, "{i} {j} {v:e}")?;
    }
    writeln!(w, "# c {n} 1")?;
    for (i, v) in program.c.iter().enumerate() {
        if *v != 0.0 {
            writeln!(w, "{i} 0 {v:e}")?;
        }
    }
    writeln!(w, "# A_eq {} {n}", program.a_eq.rows)?;
    for &(i, j, v) in &program.a_eq.entries {
        writeln!(w, "{i} {j} {v:e}")?;
    }
    writeln!(w, "# b_eq {} 1", program.b_eq.len())?;
    for (i, v) in program.b_eq.iter().enumerate() {
        writeln!(w, "{i} 0 {v:e}")?;
    }
    writeln!(w, "# A_in {} {n}", program.a_in.rows)?;
    for &(i, j, v) in &program.a_in.entries {
        writeln!(w, "{i} {j} {v:e}")?;
    }
    writeln!(w, "# b_in {} 1", program.b_in.len())?;
    for (i, v) in program.b_in.iter().enumerate() {
        writeln!(w, "{i} 0 {v:e}")?;
    }
    writeln!(w, "# bounds {n} 2")?;
    for i in 0..n {
        writeln!(w, "{i} {:e} {:e}", program.lower[i], program.upper[i])?;
    }
    writeln!(w, "# names {n}")?;
    for (i, name) in program.names.iter().enumerate() {
        writeln!(w, "{i} {name}")?;
    }
    Ok(())
}
