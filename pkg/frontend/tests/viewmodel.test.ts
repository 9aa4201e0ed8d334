// Contract tests against recorded service fixtures: every displayed value
// must be traceable verbatim to a response field, never recomputed.

import { describe, expect, it } from "vitest";
import { readFileSync } from "node:fs";
import { fileURLToPath } from "node:url";
import { dirname, join } from "node:path";

import { buildFanChart, buildLineChart, buildStepChart } from "../src/charts";
import type { SessionView, StepResponse, WhatIfResponse } from "../src/types";
import {
  badgeState,
  exact,
  makeScale,
  metricTiles,
  plevelSeries,
  polylinePoints,
  vitalSeries,
} from "../src/viewmodel";

const here = dirname(fileURLToPath(import.meta.url));
const fixture = JSON.parse(readFileSync(join(here, "fixtures", "session.json"), "utf-8")) as {
  created: SessionView;
  steps: StepResponse[];
  view: SessionView;
  whatif: WhatIfResponse;
  suggest: { action: number; distribution: number[]; levels: number[]; u: number[] };
};

describe("vital series", () => {
  it("fresh session shows exactly the six historical samples per vital", () => {
    const series = vitalSeries(fixture.created.state, [], "map");
    expect(series).toHaveLength(6);
    expect(series).toEqual(fixture.created.state.map((row) => row[0]));
  });

  it("each committed step appends its six window samples", () => {
    const series = vitalSeries(fixture.created.state, fixture.view.history, "hr");
    expect(series).toHaveLength(6 + 6 * fixture.view.history.length);
    const lastWindow = fixture.view.history[fixture.view.history.length - 1].state;
    expect(series.slice(-6)).toEqual(lastWindow.map((row) => row[6]));
  });
});

describe("metric tiles", () => {
  it("fresh session has zero running ACP", () => {
    const tiles = metricTiles(fixture.created);
    const acp = tiles.find((t) => t.label === "acp");
    expect(acp?.value).toBe(0);
  });

  it("tile values are the service metrics verbatim", () => {
    const tiles = metricTiles(fixture.view);
    expect(tiles.find((t) => t.label === "acp")?.value).toBe(fixture.view.metrics.acp);
    expect(tiles.find((t) => t.label === "ws")?.value).toBe(fixture.view.metrics.ws);
    expect(tiles.find((t) => t.label === "reward")?.value).toBe(
      fixture.view.metrics.mean_reward
    );
  });
});

describe("badges", () => {
  it("mirror the last step's stability and OOD flags", () => {
    const flags = badgeState(fixture.view);
    const last = fixture.view.history[fixture.view.history.length - 1];
    expect(flags.stable_clinical).toBe(last.stable_clinical);
    expect(flags.stable_gradient).toBe(last.stable_gradient);
    expect(flags.ood).toBe(last.ood);
  });
});

describe("threshold guide lines", () => {
  it("are drawn at exactly 60 / 50 / 10 data units", () => {
    expect(fixture.view.thresholds).toEqual({ map: 60.0, hr: 50.0, pulsatility: 10.0 });
    const doc = document;
    for (const [key, col] of [["map", 0], ["hr", 6], ["pulsatility", 9]] as const) {
      const series = vitalSeries(fixture.created.state, [], key);
      const chart = buildLineChart(doc, series, {
        label: key,
        threshold: fixture.view.thresholds[key],
      });
      const guide = chart.querySelector(".threshold-line")!;
      expect(guide.getAttribute("data-threshold")).toBe(
        exact(fixture.view.thresholds[key])
      );
      // the guide sits exactly at the scaled data coordinate of the threshold
      const scale = makeScale(series, 320, 120, [fixture.view.thresholds[key]]);
      expect(guide.getAttribute("y1")).toBe(scale.y(fixture.view.thresholds[key]).toFixed(2));
      const label = chart.querySelector(".threshold-label")!;
      expect(label.textContent).toBe(String(fixture.view.thresholds[key]));
      expect(series[0]).toBe(fixture.created.state[0][col]);
    }
  });
});

describe("fan charts", () => {
  it("band polygons carry the exact percentile arrays", () => {
    const chart = buildFanChart(document, fixture.whatif.bands.map, { label: "map" });
    const band = chart.querySelector(".fan-band")!;
    expect(JSON.parse(band.getAttribute("data-p10")!)).toEqual(fixture.whatif.bands.map.p10);
    expect(JSON.parse(band.getAttribute("data-p90")!)).toEqual(fixture.whatif.bands.map.p90);
    const median = chart.querySelector(".fan-median")!;
    expect(JSON.parse(median.getAttribute("data-p50")!)).toEqual(fixture.whatif.bands.map.p50);
  });

  it("median lies between the band edges pointwise", () => {
    for (const key of ["map", "hr", "pulsatility"] as const) {
      const band = fixture.whatif.bands[key];
      band.p50.forEach((v, i) => {
        expect(v).toBeGreaterThanOrEqual(band.p10[i] - 1e-12);
        expect(v).toBeLessThanOrEqual(band.p90[i] + 1e-12);
      });
    }
  });
});

describe("p-level staircase", () => {
  it("starts at the initial level and follows committed actions", () => {
    const levels = plevelSeries(fixture.created.plevel, fixture.view.history);
    expect(levels[0]).toBe(fixture.created.plevel);
    expect(levels.slice(1)).toEqual(fixture.view.history.map((h) => h.action));
    const chart = buildStepChart(document, levels, "P-level");
    expect(JSON.parse(chart.querySelector(".series-line")!.getAttribute("data-values")!)).toEqual(levels);
  });
});

describe("scales", () => {
  it("map a flat series without dividing by zero", () => {
    const scale = makeScale([5, 5, 5], 100, 50);
    expect(Number.isFinite(scale.y(5))).toBe(true);
  });

  it("polyline spans the full width", () => {
    const scale = makeScale([0, 1, 2], 100, 50);
    const points = polylinePoints([0, 1, 2], scale).split(" ");
    expect(points[0].startsWith("0.00,")).toBe(true);
    expect(points[2].startsWith("100.00,")).toBe(true);
  });
});

describe("suggestion fixture", () => {
  it("distribution sums to one", () => {
    const total = fixture.suggest.distribution.reduce((a, b) => a + b, 0);
    expect(Math.abs(total - 1)).toBeLessThan(1e-6);
  });
});
