// Typed client for the rating service HTTP API.

export interface RatingTask {
  task_id: string;
  image_id: string;
  prototype_id: number;
  model_id: string;
  image_url: string;
  heatmap_url: string;
  rubric: Record<string, string>;
}

export interface Progress {
  total: number;
  rated: number;
  per_rater: Record<string, number>;
}

export type SubmitOutcome = "created" | "duplicate";

export class ValidationError extends Error {}

export class ApiClient {
  constructor(private baseUrl: string = "") {}

  /** Next unrated task for this rater, or null once the pool is exhausted. */
  async nextTask(raterId: string): Promise<RatingTask | null> {
    const resp = await fetch(
      `${this.baseUrl}/api/tasks/next?rater_id=${encodeURIComponent(raterId)}`,
    );
    if (resp.status === 204) return null;
    if (!resp.ok) throw new Error(`task fetch failed: ${resp.status}`);
    return (await resp.json()) as RatingTask;
  }

  /**
   * Submit one 1-5 rating. The guard here is the last line of defense: the
   * client never puts an out-of-range rating on the wire.
   */
  async submitRating(
    task: RatingTask,
    rating: number,
    raterId: string,
  ): Promise<SubmitOutcome> {
    if (!Number.isInteger(rating) || rating < 1 || rating > 5) {
      throw new ValidationError(`rating must be an integer 1-5, got ${rating}`);
    }
    const resp = await fetch(`${this.baseUrl}/api/ratings`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({
        image_id: task.image_id,
        prototype_id: task.prototype_id,
        model_id: task.model_id,
        rating,
        rater_id: raterId,
      }),
    });
    if (resp.status === 201) return "created";
    if (resp.status === 409) return "duplicate";
    if (resp.status === 400) {
      const body = await resp.json().catch(() => ({ error: "invalid rating" }));
      throw new ValidationError(body.error ?? "invalid rating");
    }
    throw new Error(`rating submit failed: ${resp.status}`);
  }

  async progress(): Promise<Progress> {
    const resp = await fetch(`${this.baseUrl}/api/progress`);
    if (!resp.ok) throw new Error(`progress fetch failed: ${resp.status}`);
    return (await resp.json()) as Progress;
  }
}
