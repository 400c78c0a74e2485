/** Bootstrap: wire the controller, keyboard handling and background sync. */

import { HttpReviewApi } from "./api.js";
import { render } from "./render.js";
import { QueueController } from "./state.js";

const SYNC_INTERVAL_MS = 15_000;
const ZOOM_STEPS = [1, 1.5, 2, 3];

function reviewerName(): string {
  const fromQuery = new URLSearchParams(window.location.search).get("reviewer");
  return fromQuery ?? "anonymous";
}

function start(): void {
  const root = document.getElementById("app");
  if (root === null) {
    throw new Error("missing #app mount point");
  }
  let zoomIndex = 0;
  const controller: QueueController = new QueueController(new HttpReviewApi(), () =>
    render(root, controller.view(), ZOOM_STEPS[zoomIndex]),
  );

  window.addEventListener("keydown", (event) => {
    if (event.key === "+" || event.key === "=") {
      zoomIndex = Math.min(zoomIndex + 1, ZOOM_STEPS.length - 1);
      render(root, controller.view(), ZOOM_STEPS[zoomIndex]);
      return;
    }
    if (event.key === "-") {
      zoomIndex = Math.max(zoomIndex - 1, 0);
      render(root, controller.view(), ZOOM_STEPS[zoomIndex]);
      return;
    }
    void controller.handleKey(event.key, reviewerName());
  });

  const tick = async (): Promise<void> => {
    const ok = await controller.sync();
    window.setTimeout(tick, ok ? SYNC_INTERVAL_MS : controller.nextRetryDelay());
  };
  void tick();
}

start();
