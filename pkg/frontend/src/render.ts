/** DOM rendering: three synchronized panes, confidence readout, progress. */

import type { QueueItem } from "./api.js";
import type { UiQueueView } from "./state.js";

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className = "",
  text = "",
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text) node.textContent = text;
  return node;
}

function fmt(value: number | string | null): string {
  if (value === null || value === undefined) return "-";
  if (typeof value === "string") return value; // "inf" sentinel from the API
  return value.toFixed(3);
}

function pane(label: string, uri: string, zoom: number): HTMLElement {
  const box = el("figure", "pane");
  const img = el("img");
  img.src = uri;
  img.style.transform = `scale(${zoom})`;
  img.alt = label;
  img.addEventListener("error", () => {
    box.replaceChildren(
      el("div", "media-error", `failed to load ${label}; skip with "n"`),
      el("figcaption", "", label),
    );
  });
  box.append(img, el("figcaption", "", label));
  return box;
}

function confidence(item: QueueItem): HTMLElement {
  const dl = el("dl", "confidence");
  const rows: Array<[string, string]> = [
    ["ratio_mu", fmt(item.tlsa.ratio_mu)],
    ["ratio_v", fmt(item.tlsa.ratio_v)],
    ["phi_pi", fmt(item.tlsa.phi_pi)],
    ["branch", item.tlsa.branch_taken ?? "-"],
  ];
  for (const [k, v] of rows) {
    dl.append(el("dt", "", k), el("dd", "", v));
  }
  return dl;
}

export function renderItem(item: QueueItem, zoom: number): HTMLElement {
  const card = el("section", "item-card");
  const header = el("header", "item-header");
  header.append(el("h2", "", item.id), confidence(item));
  const panes = el("div", "panes");
  panes.append(
    pane("image", item.image_uri, zoom),
    pane("labels (G1 red / G2 blue / both white)", item.overlay_uris.labels, zoom),
    pane("proposals (P1 red / P2 green / P3 blue)", item.overlay_uris.rps, zoom),
  );
  card.append(header, panes);
  return card;
}

function summary(view: UiQueueView): HTMLElement {
  const done = el("section", "summary");
  done.append(el("h2", "", "queue complete"));
  const list = el("ul");
  list.append(
    el("li", "", `G1 kept: ${view.counts.G1}`),
    el("li", "", `G2 kept: ${view.counts.G2}`),
    el("li", "", `both rejected: ${view.counts.reject_both}`),
    el("li", "", `decided this stack: ${view.decidedCount} of ${view.total}`),
  );
  done.append(list);
  return done;
}

export function render(root: HTMLElement, view: UiQueueView, zoom: number): void {
  root.replaceChildren();

  if (view.stale) {
    root.append(el("div", "banner stale", "connection lost; retrying in the background"));
  }
  if (view.error) {
    root.append(el("div", "banner error", view.error));
  }

  const progress = el(
    "div",
    "progress",
    `${view.decidedCount} decided / ${view.items.length} pending of ${view.total}`,
  );
  root.append(progress);

  const item = view.items[view.cursor];
  if (item !== undefined) {
    root.append(renderItem(item, zoom));
    root.append(
      el("div", "keys", 'keys: 1 = keep G1, 2 = keep G2, 0 = reject both, n = skip, +/- zoom'),
    );
  } else if (view.total > 0 && view.items.length === 0) {
    root.append(summary(view));
  } else {
    root.append(el("div", "empty", "nothing to review"));
  }
}
