//! SVG rendering of placements: canvas border, macros as filled labeled
//! rectangles, fixed modules hatched, optional net bounding boxes.

use std::collections::BTreeMap;

use gridplace::netlist::Netlist;

const VIEW: f64 = 800.0;
const MARGIN: f64 = 20.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Render a placement to an SVG string. `positions` maps module id to the
/// physical lower-left corner; modules without a position are skipped.
pub fn render_svg(
    netlist: &Netlist,
    positions: &BTreeMap<usize, (f64, f64)>,
    net_boxes: bool,
) -> String {
    let (cw, ch) = netlist.canvas;
    let scale = (VIEW - 2.0 * MARGIN) / cw.max(ch);
    // SVG y grows downward; flip so the circuit's origin is bottom-left.
    let tx = |x: f64| MARGIN + x * scale;
    let ty = |y: f64| VIEW - MARGIN - y * scale;

    let mut out = String::new();
    out.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{VIEW}\" height=\"{VIEW}\" viewBox=\"0 0 {VIEW} {VIEW}\">\n"
    ));
    out.push_str("<defs><pattern id=\"hatch\" width=\"6\" height=\"6\" patternUnits=\"userSpaceOnUse\" patternTransform=\"rotate(45)\"><line x1=\"0\" y1=\"0\" x2=\"0\" y2=\"6\" stroke=\"#777777\" stroke-width=\"2\"/></pattern></defs>\n");
    out.push_str(&format!(
        "<rect x=\"{:.3}\" y=\"{:.3}\" width=\"{:.3}\" height=\"{:.3}\" fill=\"white\" stroke=\"black\" stroke-width=\"1.5\"/>\n",
        tx(0.0),
        ty(ch),
        cw * scale,
        ch * scale
    ));

    for (&id, &(x, y)) in positions {
        let m = netlist.module(id);
        if m.width <= 0.0 || m.height <= 0.0 {
            // Zero-area modules (ports) draw as small markers.
            out.push_str(&format!(
                "<circle cx=\"{:.3}\" cy=\"{:.3}\" r=\"3\" fill=\"#333333\"/>\n",
                tx(x),
                ty(y)
            ));
            continue;
        }
        let fill = if m.fixed { "url(#hatch)" } else { "#c23b3b" };
        out.push_str(&format!(
            "<rect x=\"{:.3}\" y=\"{:.3}\" width=\"{:.3}\" height=\"{:.3}\" fill=\"{}\" fill-opacity=\"0.8\" stroke=\"#222222\" stroke-width=\"0.8\"/>\n",
            tx(x),
            ty(y + m.height),
            m.width * scale,
            m.height * scale,
            fill
        ));
        let font = (m.width.min(m.height) * scale * 0.5).clamp(6.0, 18.0);
        out.push_str(&format!(
            "<text x=\"{:.3}\" y=\"{:.3}\" font-size=\"{font:.1}\" text-anchor=\"middle\" fill=\"#111111\">{}</text>\n",
            tx(x + m.width / 2.0),
            ty(y + m.height / 2.0) + font / 3.0,
            esc(&m.name)
        ));
    }

    if net_boxes {
        for net in &netlist.nets {
            let mut lo = (f64::INFINITY, f64::INFINITY);
            let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            let mut pins = 0;
            for pin in &net.pins {
                if let Some(&(x, y)) = positions.get(&pin.module_id) {
                    let px = x + pin.offset.0;
                    let py = y + pin.offset.1;
                    lo = (lo.0.min(px), lo.1.min(py));
                    hi = (hi.0.max(px), hi.1.max(py));
                    pins += 1;
                }
            }
            if pins >= 2 {
                out.push_str(&format!(
                    "<rect x=\"{:.3}\" y=\"{:.3}\" width=\"{:.3}\" height=\"{:.3}\" fill=\"none\" stroke=\"#3b6fc2\" stroke-width=\"0.6\" stroke-dasharray=\"4 3\"/>\n",
                    tx(lo.0),
                    ty(hi.1),
                    (hi.0 - lo.0) * scale,
                    (hi.1 - lo.1) * scale
                ));
            }
        }
    }

    out.push_str("</svg>\n");
    out
}
