//! Closed-form parameter ledger: walks the config's channel arithmetic
//! layer by layer. Shares no code with the graph builder.

use fishnet::fishnet::{Arch, Downsample, Stem};
use fishnet::FishNetConfig;

fn conv(cin: u64, cout: u64, k: u64, groups: u64) -> u64 {
    cout * (cin / groups) * k * k
}

fn bn(c: u64) -> u64 {
    2 * c
}

struct Ledger<'a> {
    cfg: &'a FishNetConfig,
}

impl Ledger<'_> {
    fn groups(&self, width: u64, stage: usize) -> u64 {
        if self.cfg.group_width == 0 {
            1
        } else {
            (width / ((self.cfg.group_width as u64) << stage)).max(1)
        }
    }

    fn bottleneck(&self, cin: u64, out: u64, stage: usize) -> u64 {
        let w = (out / 4).max(1);
        bn(cin) + conv(cin, w, 1, 1) + bn(w) + conv(w, w, 3, self.groups(w, stage)) + bn(w) + conv(w, out, 1, 1)
    }

    /// Residual block; a projection appears when the width changes or the
    /// block is strided.
    fn residual(&self, cin: u64, out: u64, stage: usize, strided: bool) -> u64 {
        let proj = if cin != out || strided { cin * out } else { 0 };
        self.bottleneck(cin, out, stage) + proj
    }

    fn down(&self, c: u64) -> u64 {
        match self.cfg.downsample {
            Downsample::Conv => bn(c) + conv(c, c, 3, 1),
            _ => 0,
        }
    }

    fn total(&self) -> u64 {
        let cfg = self.cfg;
        let n = cfg.num_stages;
        let ch: Vec<u64> = cfg.channels.iter().map(|&c| c as u64).collect();
        let cin = cfg.input_shape[0] as u64;
        let mut total = match cfg.stem {
            Stem::Conv7x7S2 => conv(cin, ch[0], 7, 1),
            Stem::TwoResidualBlocks => self.residual(cin, ch[0], 0, true) + self.residual(ch[0], ch[0], 0, false),
        };
        let final_c;
        match cfg.arch {
            Arch::FishNet => {
                // tail
                let mut prev = ch[0];
                for s in 0..n {
                    if s > 0 {
                        total += self.down(prev);
                    }
                    for b in 0..cfg.tail_blocks[s] {
                        let i = if b == 0 { prev } else { ch[s] };
                        total += self.residual(i, ch[s], s, false);
                    }
                    prev = ch[s];
                }
                // bridge: squeeze/excite 1×1 convs and a bottleneck branch
                let c = ch[n - 1];
                let sq = (c / cfg.se_reduction as u64).max(1);
                total += c * sq + sq * c + self.bottleneck(c, c, n - 1);
                // body
                let mut body = vec![0u64; n];
                body[n - 1] = c;
                for s in (1..n).rev() {
                    let merged = body[s] + ch[s];
                    let out = merged / cfg.reduction_k[s] as u64;
                    total += self.residual(ch[s], ch[s], s, false); // transfer
                    total += self.bottleneck(merged, out, s); // M
                    total += (cfg.body_blocks[s] as u64 - 1) * self.residual(out, out, s, false);
                    body[s - 1] = out;
                }
                total += cfg.body_blocks[0] as u64 * self.residual(body[0], body[0], 0, false);
                // head
                let mut h = body[0];
                for s in 0..n {
                    let src = if s == 0 { ch[0] } else { body[s] };
                    total += self.residual(src, src, s, false);
                    h += src;
                    total += cfg.head_blocks[s] as u64 * self.residual(h, h, s, false);
                    if s + 1 < n {
                        total += self.down(h);
                    }
                }
                final_c = h;
            }
            Arch::ResNetControl => {
                let mut prev = ch[0];
                for s in 0..n {
                    if s > 0 {
                        total += conv(prev, ch[s], 1, 1) + bn(ch[s]);
                    }
                    total += cfg.tail_blocks[s] as u64 * self.residual(ch[s], ch[s], s, false);
                    prev = ch[s];
                }
                final_c = prev;
            }
            Arch::PlainCnn => {
                let mut prev = ch[0];
                for s in 0..n {
                    if s > 0 {
                        total += self.down(prev);
                    }
                    for _ in 0..cfg.tail_blocks[s] {
                        total += bn(prev) + conv(prev, ch[s], 3, 1);
                        prev = ch[s];
                    }
                }
                final_c = prev;
            }
        }
        total + bn(final_c) + conv(final_c, cfg.num_classes as u64, 1, 1)
    }
}

pub fn param_ledger(cfg: &FishNetConfig) -> u64 {
    Ledger { cfg }.total()
}
