use crate::Format;

/// Rows of cells printed either as aligned text or as TSV.
pub struct Table {
    header: Vec<&'static str>,
    /// Right-align these columns in text mode.
    numeric: Vec<bool>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(columns: &[(&'static str, bool)]) -> Self {
        Self {
            header: columns.iter().map(|c| c.0).collect(),
            numeric: columns.iter().map(|c| c.1).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self, format: Format) -> String {
        let mut out = String::new();
        match format {
            Format::Tsv => {
                out.push_str(&self.header.join("\t"));
                out.push('\n');
                for r in &self.rows {
                    out.push_str(&r.join("\t"));
                    out.push('\n');
                }
            }
            Format::Text => {
                let mut widths: Vec<usize> = self.header.iter().map(|h| h.chars().count()).collect();
                for r in &self.rows {
                    for (w, cell) in widths.iter_mut().zip(r) {
                        *w = (*w).max(cell.chars().count());
                    }
                }
                let line = |cells: Vec<&str>| {
                    let parts: Vec<String> = cells
                        .iter()
                        .zip(&widths)
                        .zip(&self.numeric)
                        .map(|((c, &w), &num)| if num { format!("{c:>w$}") } else { format!("{c:<w$}") })
                        .collect();
                    parts.join("  ").trim_end().to_string() + "\n"
                };
                out.push_str(&line(self.header.clone()));
                for r in &self.rows {
                    out.push_str(&line(r.iter().map(String::as_str).collect()));
                }
            }
        }
        out
    }
}
