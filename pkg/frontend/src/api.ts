/** Types and HTTP client for the review-queue JSON API. */

export type Choice = "G1" | "G2" | "reject_both";

/** Selection confidence attached to each queued image. */
export interface TlsaSummary {
  tau: string;
  ratio_mu: number | string | null;
  ratio_v: number | string | null;
  eta: number | null;
  phi_pi: number | string | null;
  branch_taken: string | null;
}

export interface QueueItem {
  id: string;
  image_uri: string;
  overlay_uris: { labels: string; rps: string };
  tlsa: TlsaSummary;
  status: "pending" | "decided";
}

export interface QueueSnapshot {
  pending: QueueItem[];
  total: number;
  decided: number;
}

export interface ReviewApi {
  fetchQueue(): Promise<QueueSnapshot>;
  postDecision(id: string, choice: Choice, reviewer: string, note?: string): Promise<void>;
}

export class HttpReviewApi implements ReviewApi {
  constructor(private readonly base: string = "") {}

  async fetchQueue(): Promise<QueueSnapshot> {
    const resp = await fetch(`${this.base}/api/queue`);
    if (!resp.ok) {
      throw new Error(`queue fetch failed: ${resp.status}`);
    }
    return (await resp.json()) as QueueSnapshot;
  }

  async postDecision(id: string, choice: Choice, reviewer: string, note = ""): Promise<void> {
    const resp = await fetch(`${this.base}/api/decision`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ id, choice, reviewer, note }),
    });
    if (!resp.ok) {
      let detail = `${resp.status}`;
      try {
        const body = (await resp.json()) as { error?: string };
        if (body.error) detail = body.error;
      } catch {
        // non-JSON error body; keep the status code
      }
      throw new Error(`decision rejected: ${detail}`);
    }
  }
}
