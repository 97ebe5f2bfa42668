use qdecomp_core::envs::GridSpec;
use qdecomp_core::uncertainty::{normalize, UncertaintyMap};
use qdecomp_core::Error;

/// Renders a grid-shaped map as `height` lines of `width` cells. Each cell
/// is `EE/AA`, the normalised epistemic and aleatoric values scaled to
/// 0..=99. Cliff cells show `X`, other terminal cells `G`. An unnormalised
/// map is normalised first.
pub fn render_ascii(map: &UncertaintyMap, grid: &GridSpec) -> Result<String, Error> {
    if map.len() != grid.n_cells() {
        return Err(Error::ShapeMismatch(format!(
            "map has {} states, grid has {} cells",
            map.len(),
            grid.n_cells()
        )));
    }
    let normalized;
    let map = if map.entries.iter().all(|e| e.normalized.is_some()) {
        map
    } else {
        normalized = normalize(map);
        &normalized
    };
    let two_digits = |x: f64| (x.clamp(0.0, 1.0) * 99.0).round() as u32;
    let mut lines = Vec::with_capacity(grid.height);
    for r in 1..=grid.height {
        let mut cells = Vec::with_capacity(grid.width);
        for c in 1..=grid.width {
            let entry = &map.entries[grid.state_of((r, c))?];
            let text = if grid.is_cliff((r, c)) {
                "X".to_string()
            } else if entry.terminal {
                "G".to_string()
            } else {
                let (e, a) = entry.normalized.unwrap_or_default();
                format!("{:02}/{:02}", two_digits(e), two_digits(a))
            };
            cells.push(format!("{text:<5}"));
        }
        lines.push(cells.join(" ").trim_end().to_string());
    }
    Ok(lines.join("\n"))
}
