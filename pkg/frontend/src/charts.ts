// SVG chart builders.  Raw arrays in, DOM nodes out; no smoothing and no
// derived values beyond coordinate mapping.

import type { Band } from "./types";
import {
  Scale,
  bandPolygonPoints,
  exact,
  makeScale,
  polylinePoints,
} from "./viewmodel";

const SVG_NS = "http://www.w3.org/2000/svg";

export interface LineChartOptions {
  width?: number;
  height?: number;
  threshold?: number; // clinical guide line in data units
  label: string;
}

function svgElement(doc: Document, tag: string, attrs: Record<string, string>): SVGElement {
  const el = doc.createElementNS(SVG_NS, tag) as SVGElement;
  for (const [key, value] of Object.entries(attrs)) {
    el.setAttribute(key, value);
  }
  return el;
}

export function buildLineChart(
  doc: Document,
  values: number[],
  options: LineChartOptions
): SVGElement {
  const width = options.width ?? 320;
  const height = options.height ?? 120;
  const mustInclude = options.threshold !== undefined ? [options.threshold] : [];
  const scale = makeScale(values, width, height, mustInclude);
  const svg = svgElement(doc, "svg", {
    width: String(width),
    height: String(height),
    class: "line-chart",
    "data-label": options.label,
    "data-points": String(values.length),
  });
  if (options.threshold !== undefined) {
    const y = scale.y(options.threshold).toFixed(2);
    const guide = svgElement(doc, "line", {
      x1: "0",
      x2: String(width),
      y1: y,
      y2: y,
      class: "threshold-line",
      "data-threshold": exact(options.threshold),
    });
    svg.appendChild(guide);
    const label = svgElement(doc, "text", {
      x: "2",
      y: String(Math.max(10, Number(y) - 2)),
      class: "threshold-label",
    });
    label.textContent = exact(options.threshold);
    svg.appendChild(label);
  }
  const line = svgElement(doc, "polyline", {
    points: polylinePoints(values, scale),
    fill: "none",
    class: "series-line",
    "data-values": JSON.stringify(values),
  });
  svg.appendChild(line);
  return svg;
}

export interface FanChartOptions {
  width?: number;
  height?: number;
  threshold?: number;
  label: string;
}

export function buildFanChart(
  doc: Document,
  band: Band,
  options: FanChartOptions
): SVGElement {
  const width = options.width ?? 280;
  const height = options.height ?? 110;
  const mustInclude = options.threshold !== undefined ? [options.threshold] : [];
  const scale: Scale = makeScale(
    [...band.p10, ...band.p50, ...band.p90],
    width,
    height,
    mustInclude
  );
  const svg = svgElement(doc, "svg", {
    width: String(width),
    height: String(height),
    class: "fan-chart",
    "data-label": options.label,
  });
  svg.appendChild(
    svgElement(doc, "polygon", {
      points: bandPolygonPoints(band, scale),
      class: "fan-band",
      "data-p10": JSON.stringify(band.p10),
      "data-p90": JSON.stringify(band.p90),
    })
  );
  svg.appendChild(
    svgElement(doc, "polyline", {
      points: polylinePoints(band.p50, scale),
      fill: "none",
      class: "fan-median",
      "data-p50": JSON.stringify(band.p50),
    })
  );
  if (options.threshold !== undefined) {
    const y = scale.y(options.threshold).toFixed(2);
    svg.appendChild(
      svgElement(doc, "line", {
        x1: "0",
        x2: String(width),
        y1: y,
        y2: y,
        class: "threshold-line",
        "data-threshold": exact(options.threshold),
      })
    );
  }
  return svg;
}

export function buildStepChart(doc: Document, levels: number[], label: string): SVGElement {
  const width = 320;
  const height = 80;
  const scale = makeScale(levels, width, height, [2, 9]);
  // support levels hold between decisions: draw as a staircase
  const points: string[] = [];
  levels.forEach((level, i) => {
    const y = scale.y(level).toFixed(2);
    points.push(`${scale.x(i, levels.length).toFixed(2)},${y}`);
    if (i + 1 < levels.length) {
      points.push(`${scale.x(i + 1, levels.length).toFixed(2)},${y}`);
    }
  });
  const svg = svgElement(doc, "svg", {
    width: String(width),
    height: String(height),
    class: "step-chart",
    "data-label": label,
    "data-points": String(levels.length),
  });
  svg.appendChild(
    svgElement(doc, "polyline", {
      points: points.join(" "),
      fill: "none",
      class: "series-line",
      "data-values": JSON.stringify(levels),
    })
  );
  return svg;
}
