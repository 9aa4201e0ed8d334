// Pure view-model functions: service JSON in, chart geometry and tile
// values out.  No DOM access and no recomputation of rewards or metrics;
// every number is passed through from a response field.

import type { Band, SessionView, StepRecord, VitalKey, WhatIfResponse } from "./types";
import { VITAL_COLUMNS } from "./types";

export interface Scale {
  min: number;
  max: number;
  width: number;
  height: number;
  x(i: number, n: number): number;
  y(value: number): number;
}

export function makeScale(
  values: number[],
  width: number,
  height: number,
  mustInclude: number[] = []
): Scale {
  const all = values.concat(mustInclude);
  let min = Math.min(...all);
  let max = Math.max(...all);
  if (min === max) {
    min -= 1;
    max += 1;
  }
  const pad = 0.08 * (max - min);
  min -= pad;
  max += pad;
  return {
    min,
    max,
    width,
    height,
    x: (i, n) => (n <= 1 ? 0 : (i / (n - 1)) * width),
    y: (value) => height - ((value - min) / (max - min)) * height,
  };
}

/** 10-minute samples of one vital: initial window rows plus each committed
 * step's window rows, in order. */
export function vitalSeries(
  initialState: number[][],
  history: StepRecord[],
  key: VitalKey
): number[] {
  const col = VITAL_COLUMNS[key];
  const values = initialState.map((row) => row[col]);
  for (const record of history) {
    for (const row of record.state) {
      values.push(row[col]);
    }
  }
  return values;
}

/** Support level per committed step, prefixed by the session's starting level. */
export function plevelSeries(initialLevel: number, history: StepRecord[]): number[] {
  return [initialLevel, ...history.map((record) => record.action)];
}

export interface Tile {
  label: string;
  value: number;
}

export function metricTiles(view: SessionView): Tile[] {
  return [
    { label: "reward", value: view.metrics.mean_reward },
    { label: "acp", value: view.metrics.acp },
    { label: "ws", value: view.metrics.ws },
  ];
}

export interface BadgeState {
  stable_clinical: boolean | null;
  stable_gradient: boolean | null;
  ood: boolean | null;
}

export function badgeState(view: SessionView): BadgeState {
  const last = view.history.length > 0 ? view.history[view.history.length - 1] : null;
  return {
    stable_clinical: last ? last.stable_clinical : null,
    stable_gradient: last ? last.stable_gradient : null,
    ood: last ? last.ood : null,
  };
}

export function polylinePoints(values: number[], scale: Scale): string {
  return values
    .map((v, i) => `${scale.x(i, values.length).toFixed(2)},${scale.y(v).toFixed(2)}`)
    .join(" ");
}

/** Closed polygon spanning the p10..p90 band of a fan chart. */
export function bandPolygonPoints(band: Band, scale: Scale): string {
  const n = band.p10.length;
  const upper = band.p90.map(
    (v, i) => `${scale.x(i, n).toFixed(2)},${scale.y(v).toFixed(2)}`
  );
  const lower = band.p10
    .slice()
    .reverse()
    .map((v, i) => `${scale.x(n - 1 - i, n).toFixed(2)},${scale.y(v).toFixed(2)}`);
  return [...upper, ...lower].join(" ");
}

export function fanScale(
  whatif: WhatIfResponse,
  key: VitalKey,
  width: number,
  height: number,
  mustInclude: number[] = []
): Scale {
  const band = whatif.bands[key];
  return makeScale([...band.p10, ...band.p50, ...band.p90], width, height, mustInclude);
}

/** Exact string form of a response number; used for data-value attributes so
 * tests can check rendered values against the wire values verbatim. */
export function exact(value: number | boolean | null): string {
  return String(value);
}

/** Short human form shown next to the exact attribute. */
export function pretty(value: number): string {
  return Math.abs(value) >= 100 ? value.toFixed(0) : value.toFixed(3);
}
