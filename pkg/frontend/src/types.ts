// Mirrors of the what-if service JSON schemas.  The UI never recomputes
// any of these numbers client-side; it only renders them.

export interface RunningMetrics {
  acp: number;
  ws: number;
  mean_reward: number;
  steps: number;
}

export interface Thresholds {
  map: number;
  hr: number;
  pulsatility: number;
}

export interface StepRecord {
  t: number;
  action: number;
  state: number[][]; // 6x12 window after the step
  reward_raw: number;
  reward_normalized: number;
  stable_clinical: boolean;
  stable_gradient: boolean;
  u: number | null;
  u_plus: number | null;
  u_minus: number | null;
  ood: boolean | null;
}

export interface SessionView {
  id: string;
  state: number[][];
  plevel: number;
  t: number;
  history: StepRecord[];
  metrics: RunningMetrics;
  state_hash: string;
  thresholds: Thresholds;
}

export interface StepResponse extends StepRecord {
  metrics: RunningMetrics;
  state_hash: string;
}

export interface Band {
  p10: number[];
  p50: number[];
  p90: number[];
}

export interface ScalarBand {
  p10: number;
  p50: number;
  p90: number;
}

export interface WhatIfStep {
  t: number;
  action: number;
  map: number[];
  hr: number[];
  pulsatility: number[];
  reward_raw: number;
  reward_normalized: number;
}

export interface WhatIfResponse {
  action: number | null;
  horizon: number;
  n_samples: number;
  bands: { map: Band; hr: Band; pulsatility: Band };
  reward_bands: Band;
  ws: ScalarBand;
  samples: WhatIfStep[][];
}

export interface Capabilities {
  twin: boolean;
  guardian: boolean;
  policy: boolean;
  session_timeout_s: number;
}

export interface Suggestion {
  action: number;
  distribution: number[];
  levels: number[];
  u: (number | null)[];
}

// Column indices of the vitals inside a 6x12 window row.
export const VITAL_COLUMNS = { map: 0, hr: 6, pulsatility: 9 } as const;
export type VitalKey = keyof typeof VITAL_COLUMNS;
