/** Turn-based session flow: start form -> quiz loop -> feedback report.
 *
 * Every state change round-trips the API; mastery values are overwritten
 * with the payload the service returns, never computed client-side.
 */

import {
  ApiError,
  FeedbackDocument,
  ItemPayload,
  MasteryEntry,
  QuizApi,
} from "./api.js";

export type Screen = "start" | "quiz" | "feedback";

export interface MasteryBar {
  skillId: string;
  name: string;
  value: number;
  /** value formatted to two decimals, exactly as rendered */
  label: string;
}

export class QuizFlow {
  screen: Screen = "start";
  busy = false;
  error: string | null = null;

  sessionId: string | null = null;
  status: "active" | "finished" = "active";
  budget = 0;
  stepsDone = 0;
  mastery: MasteryEntry[] = [];
  item: ItemPayload | null = null;
  feedback: FeedbackDocument | null = null;

  constructor(private readonly api: QuizApi) {}

  /** Start screen submit: empty student id starts a fresh learner. */
  async start(studentId: string, budget: number): Promise<void> {
    this.error = null;
    this.busy = true;
    try {
      const trimmed = studentId.trim();
      const created = await this.api.createSession({
        ...(trimmed ? { student_id: trimmed } : {}),
        budget,
      });
      this.sessionId = created.session_id;
      this.status = created.status;
      this.budget = created.budget;
      this.stepsDone = created.step;
      this.mastery = created.mastery;
      this.feedback = null;
      this.item = null;
      if (created.status === "finished") {
        await this.openFeedback();
      } else {
        this.screen = "quiz";
        await this.fetchNext();
      }
    } catch (err) {
      this.error = describeError(err); // stay on the start screen
    } finally {
      this.busy = false;
    }
  }

  /** Ask the service for the next item; failures leave current state intact. */
  async fetchNext(): Promise<void> {
    if (!this.sessionId) return;
    try {
      this.item = await this.api.nextItem(this.sessionId);
      this.error = null;
    } catch (err) {
      this.error = describeError(err);
    }
  }

  /** Answer the outstanding item; mastery bars re-render from the
   * response's deltas. The last answer moves to the feedback screen. */
  async answer(correct: 0 | 1): Promise<void> {
    if (!this.sessionId || !this.item || this.busy) return;
    this.busy = true;
    try {
      const result = await this.api.submitResponse(
        this.sessionId,
        this.item.item_id,
        correct,
      );
      for (const delta of result.mastery_deltas) {
        const entry = this.mastery.find((m) => m.skill_id === delta.skill_id);
        if (entry) entry.value = delta.after;
      }
      this.status = result.status;
      this.stepsDone = this.budget - result.steps_remaining;
      this.item = null;
      this.error = null;
      if (result.status === "finished") {
        await this.openFeedback();
      } else {
        await this.fetchNext();
      }
    } catch (err) {
      this.error = describeError(err);
    } finally {
      this.busy = false;
    }
  }

  async openFeedback(): Promise<void> {
    if (!this.sessionId) return;
    try {
      this.feedback = await this.api.getFeedback(this.sessionId);
      this.screen = "feedback";
      this.error = null;
    } catch (err) {
      this.error = describeError(err);
    }
  }

  /** Re-fetch the (cached) report, e.g. on refresh. */
  async reloadFeedback(): Promise<void> {
    await this.openFeedback();
  }

  reset(): void {
    this.screen = "start";
    this.error = null;
    this.sessionId = null;
    this.status = "active";
    this.budget = 0;
    this.stepsDone = 0;
    this.mastery = [];
    this.item = null;
    this.feedback = null;
  }

  /** Bar data for rendering; labels carry the two-decimal display value. */
  masteryBars(): MasteryBar[] {
    return this.mastery.map((m) => ({
      skillId: m.skill_id,
      name: m.name,
      value: m.value,
      label: m.value.toFixed(2),
    }));
  }
}

export function describeError(err: unknown): string {
  if (err instanceof ApiError) {
    return err.status > 0 ? `${err.message} (${err.code})` : err.message;
  }
  return String(err);
}
