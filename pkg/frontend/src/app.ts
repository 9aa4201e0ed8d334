// DOM wiring for the what-if console.  The App object is also the handle
// scripted tests drive: createSession / exploreWhatIf / commitStep mirror
// the clinician's actions.

import { ServiceClient } from "./client";
import { buildFanChart, buildLineChart, buildStepChart } from "./charts";
import type { SessionView, StepResponse, VitalKey, WhatIfResponse } from "./types";
import {
  badgeState,
  exact,
  metricTiles,
  plevelSeries,
  pretty,
  vitalSeries,
} from "./viewmodel";

const VITALS: { key: VitalKey; label: string }[] = [
  { key: "map", label: "MAP (mmHg)" },
  { key: "hr", label: "HR (bpm)" },
  { key: "pulsatility", label: "Pulsatility (mmHg)" },
];

export class App {
  view: SessionView | null = null;
  initialState: number[][] | null = null;
  initialPlevel: number | null = null;
  lastWhatIf: Map<number, WhatIfResponse> = new Map();
  selectedLevel: number | null = null;

  constructor(
    private doc: Document,
    private client: ServiceClient,
    private root: HTMLElement
  ) {
    this.root.innerHTML = `
      <div id="banner" class="banner hidden"></div>
      <section id="session-info"></section>
      <section id="tiles"></section>
      <section id="badges"></section>
      <section id="vitals"></section>
      <section id="plevel"></section>
      <section id="whatif">
        <div id="whatif-controls"></div>
        <div id="fans"></div>
      </section>
      <section id="step-control"></section>
      <section id="suggestion"></section>
    `;
  }

  private el(id: string): HTMLElement {
    const element = this.doc.getElementById(id);
    if (!element) throw new Error(`missing element #${id}`);
    return element;
  }

  async checkConnection(): Promise<boolean> {
    const banner = this.el("banner");
    try {
      await this.client.capabilities();
      banner.classList.add("hidden");
      banner.textContent = "";
      return true;
    } catch {
      banner.classList.remove("hidden");
      banner.textContent = "service unreachable — reconnect and retry";
      return false;
    }
  }

  async createSession(seed = 0): Promise<SessionView> {
    const view = await this.client.createSession({ seed });
    this.view = view;
    this.initialState = view.state;
    this.initialPlevel = view.plevel;
    this.lastWhatIf.clear();
    this.selectedLevel = null;
    this.render();
    return view;
  }

  async refresh(): Promise<void> {
    if (!this.view) return;
    this.view = await this.client.getSession(this.view.id);
    this.render();
  }

  render(): void {
    const view = this.view;
    if (!view || !this.initialState || this.initialPlevel === null) return;

    this.el("session-info").innerHTML =
      `<span class="session-id">session ${view.id.slice(0, 8)}</span>` +
      `<span class="session-step" data-steps="${view.t}">hour ${view.t}</span>` +
      `<span class="session-plevel" data-value="${exact(view.plevel)}">P${view.plevel}</span>`;

    const tiles = this.el("tiles");
    tiles.innerHTML = "";
    for (const tile of metricTiles(view)) {
      const div = this.doc.createElement("div");
      div.className = "tile";
      div.dataset.metric = tile.label;
      div.dataset.value = exact(tile.value);
      div.textContent = `${tile.label}: ${pretty(tile.value)}`;
      tiles.appendChild(div);
    }

    const badges = this.el("badges");
    badges.innerHTML = "";
    const flags = badgeState(view);
    for (const [name, value] of Object.entries(flags)) {
      const span = this.doc.createElement("span");
      span.className = `badge badge-${name}` + (value === true && name === "ood" ? " badge-warning" : "");
      span.dataset.flag = name;
      span.dataset.value = exact(value);
      span.textContent =
        value === null ? `${name}: –` : `${name}: ${value ? (name === "ood" ? "OOD!" : "yes") : "no"}`;
      badges.appendChild(span);
    }

    const vitals = this.el("vitals");
    vitals.innerHTML = "";
    for (const vital of VITALS) {
      const series = vitalSeries(this.initialState, view.history, vital.key);
      const panel = this.doc.createElement("div");
      panel.className = "vital-panel";
      panel.dataset.vital = vital.key;
      panel.appendChild(
        buildLineChart(this.doc, series, {
          label: vital.label,
          threshold: view.thresholds[vital.key],
        })
      );
      vitals.appendChild(panel);
    }

    const plevel = this.el("plevel");
    plevel.innerHTML = "";
    plevel.appendChild(
      buildStepChart(this.doc, plevelSeries(this.initialPlevel, view.history), "P-level")
    );

    this.renderStepControl();
  }

  private renderStepControl(): void {
    const control = this.el("step-control");
    control.innerHTML = "";
    const select = this.doc.createElement("select");
    select.id = "commit-level";
    for (let level = 2; level <= 9; level++) {
      const option = this.doc.createElement("option");
      option.value = String(level);
      option.textContent = `P${level}`;
      if (level === (this.selectedLevel ?? this.view?.plevel)) {
        option.selected = true;
      }
      select.appendChild(option);
    }
    const button = this.doc.createElement("button");
    button.id = "commit-button";
    button.textContent = "commit step";
    button.addEventListener("click", () => {
      void this.commitStep(Number(select.value));
    });
    control.appendChild(select);
    control.appendChild(button);
  }

  /** Fan out candidate support levels side by side; session state untouched. */
  async exploreWhatIf(
    levels: number[],
    horizon = 6,
    nSamples = 50
  ): Promise<Map<number, WhatIfResponse>> {
    if (!this.view) throw new Error("no active session");
    if (levels.length < 1 || levels.length > 8) {
      throw new Error("choose between 1 and 8 candidate levels");
    }
    const fans = this.el("fans");
    fans.innerHTML = "";
    this.lastWhatIf.clear();
    for (const level of levels) {
      const response = await this.client.whatif(this.view.id, {
        action: level,
        horizon,
        n_samples: nSamples,
      });
      this.lastWhatIf.set(level, response);
      fans.appendChild(this.buildFanPanel(level, response));
    }
    return this.lastWhatIf;
  }

  cancelWhatIf(): void {
    this.el("fans").innerHTML = "";
    this.lastWhatIf.clear();
  }

  private buildFanPanel(level: number, response: WhatIfResponse): HTMLElement {
    const panel = this.doc.createElement("div");
    panel.className = "fan-panel";
    panel.dataset.level = String(level);
    const title = this.doc.createElement("h3");
    title.textContent = `hold P${level}`;
    panel.appendChild(title);
    for (const vital of VITALS) {
      panel.appendChild(
        buildFanChart(this.doc, response.bands[vital.key], {
          label: vital.label,
          threshold: this.view?.thresholds[vital.key],
        })
      );
    }
    const reward = this.doc.createElement("div");
    reward.className = "fan-reward";
    reward.dataset.p50 = JSON.stringify(response.reward_bands.p50);
    reward.textContent = `median reward/step: ${response.reward_bands.p50.map(pretty).join(", ")}`;
    panel.appendChild(reward);
    const ws = this.doc.createElement("div");
    ws.className = "fan-ws";
    ws.dataset.value = exact(response.ws.p50);
    ws.textContent = `median WS: ${pretty(response.ws.p50)}`;
    panel.appendChild(ws);
    const pick = this.doc.createElement("button");
    pick.className = "fan-select";
    pick.textContent = `plan P${level}`;
    pick.addEventListener("click", () => {
      this.selectedLevel = level;
      this.renderStepControl();
    });
    panel.appendChild(pick);
    return panel;
  }

  /** Commit one hour at the chosen level; double-clicks collapse into one
   * request via the client-side token. */
  async commitStep(level: number): Promise<StepResponse> {
    if (!this.view) throw new Error("no active session");
    const response = await this.client.step(this.view.id, level);
    this.view = await this.client.getSession(this.view.id);
    this.render();
    return response;
  }

  async showSuggestion(): Promise<void> {
    if (!this.view) return;
    const box = this.el("suggestion");
    try {
      const suggestion = await this.client.suggest(this.view.id);
      box.innerHTML = "";
      const head = this.doc.createElement("div");
      head.dataset.action = exact(suggestion.action);
      head.textContent = `policy suggests P${suggestion.action}`;
      box.appendChild(head);
      suggestion.levels.forEach((level, i) => {
        const row = this.doc.createElement("div");
        row.className = "suggest-row";
        row.dataset.level = String(level);
        row.dataset.prob = exact(suggestion.distribution[i]);
        row.dataset.u = exact(suggestion.u[i]);
        const u = suggestion.u[i];
        const flag = u !== null && u > 0 ? " ⚠ low support" : "";
        row.textContent = `P${level}: ${pretty(suggestion.distribution[i])}${flag}`;
        box.appendChild(row);
      });
    } catch {
      box.textContent = "no policy loaded";
    }
  }
}

export function mountApp(doc: Document, serviceUrl: string, root?: HTMLElement): App {
  const client = new ServiceClient(serviceUrl);
  const target = root ?? (doc.getElementById("app") as HTMLElement);
  return new App(doc, client, target);
}
